#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "veq/csv.hpp"
#include "veq/env.hpp"
#include "veq/function_sets.hpp"
#include "veq/model.hpp"
#include "veq/planning.hpp"
#include "veq/rng.hpp"
#include "veq/theory.hpp"

namespace veq {

// Everything one experiment needs, round-trippable through a flat
// key=value text file. width/height 0 mean "environment default".
struct ExperimentConfig {
    std::string env = "catch";
    int width = 0;
    int height = 0;
    double slip = 0.1;
    double reward_value = 1.0;
    int goal_row = 0;
    int goal_col = -1;
    std::string method = "ve";
    std::string strategy = "value_polytope";
    std::vector<int> ranks = {10};
    std::vector<int> dims = {10};
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    long n_samples = 100000;
    double gamma = 0.99;
    double lr = 5e-5;
    int max_steps = 50000;
    double grad_tol = 1e-7;
    std::string planner = "auto";  // auto | value_iteration | lstd_pi
    LstdConfig lstd;
    int jobs = 0;  // 0 = all hardware threads
    std::string out;

    void validate() const {
        if (env != "four_rooms" && env != "catch" && env != "three_state")
            throw std::invalid_argument("unknown env '" + env + "'");
        if (method != "mle" && method != "ve")
            throw std::invalid_argument("method must be mle or ve");
        if (strategy != "basis" && strategy != "value_polytope")
            throw std::invalid_argument("strategy must be basis or value_polytope");
        if (planner != "auto" && planner != "value_iteration" && planner != "lstd_pi")
            throw std::invalid_argument("planner must be auto, value_iteration, or lstd_pi");
        if (ranks.empty() || dims.empty() || seeds.empty())
            throw std::invalid_argument("ranks, dims, and seeds must be non-empty");
        for (int k : ranks)
            if (k < 1) throw std::invalid_argument("ranks must be positive");
        for (int d : dims)
            if (d < 1) throw std::invalid_argument("dims must be positive");
        if (n_samples < 1) throw std::invalid_argument("samples must be positive");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in [0, 1)");
        if (!(lr > 0.0) || max_steps < 1 || !(grad_tol > 0.0))
            throw std::invalid_argument("lr, max_steps, and grad_tol must be positive");
        if (jobs < 0) throw std::invalid_argument("jobs must be >= 0");
        lstd.validate();
    }
};

// ---------------------------------------------------------------------------
// Config file format: one key=value per line, '#' comments, lists
// comma-separated, doubles printed round-trip exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T, class Parse>
inline std::vector<T> parse_list(const std::string& text, Parse parse) {
    std::vector<T> out;
    std::string item;
    std::istringstream iss(text);
    while (std::getline(iss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse(item));
    }
    if (out.empty()) throw std::invalid_argument("empty list value '" + text + "'");
    return out;
}

template <class T>
inline std::string join_list(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(xs[i]);
    }
    return out;
}

}  // namespace detail

inline std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "env=" << c.env << '\n';
    os << "width=" << c.width << '\n';
    os << "height=" << c.height << '\n';
    os << "slip=" << format_exact(c.slip) << '\n';
    os << "reward=" << format_exact(c.reward_value) << '\n';
    os << "goal_row=" << c.goal_row << '\n';
    os << "goal_col=" << c.goal_col << '\n';
    os << "method=" << c.method << '\n';
    os << "strategy=" << c.strategy << '\n';
    os << "ranks=" << detail::join_list(c.ranks) << '\n';
    os << "dims=" << detail::join_list(c.dims) << '\n';
    os << "seeds=" << detail::join_list(c.seeds) << '\n';
    os << "samples=" << c.n_samples << '\n';
    os << "gamma=" << format_exact(c.gamma) << '\n';
    os << "lr=" << format_exact(c.lr) << '\n';
    os << "max_steps=" << c.max_steps << '\n';
    os << "grad_tol=" << format_exact(c.grad_tol) << '\n';
    os << "planner=" << c.planner << '\n';
    os << "lstd_samples=" << c.lstd.samples_per_policy << '\n';
    os << "lstd_iterations=" << c.lstd.n_iterations << '\n';
    os << "lstd_ridge=" << format_exact(c.lstd.ridge) << '\n';
    os << "lstd_expected_next=" << (c.lstd.expected_next_state ? 1 : 0) << '\n';
    os << "jobs=" << c.jobs << '\n';
    os << "out=" << c.out << '\n';
    return os.str();
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig c;
    std::istringstream iss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(iss, line)) {
        ++line_no;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        " is not key=value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        const auto as_int = [&]() { return static_cast<int>(parse_long(val)); };
        if (key == "env") c.env = val;
        else if (key == "width") c.width = as_int();
        else if (key == "height") c.height = as_int();
        else if (key == "slip") c.slip = parse_double(val);
        else if (key == "reward") c.reward_value = parse_double(val);
        else if (key == "goal_row") c.goal_row = as_int();
        else if (key == "goal_col") c.goal_col = as_int();
        else if (key == "method") c.method = val;
        else if (key == "strategy") c.strategy = val;
        else if (key == "ranks")
            c.ranks = detail::parse_list<int>(
                val, [](const std::string& s) { return static_cast<int>(parse_long(s)); });
        else if (key == "dims")
            c.dims = detail::parse_list<int>(
                val, [](const std::string& s) { return static_cast<int>(parse_long(s)); });
        else if (key == "seeds")
            c.seeds = detail::parse_list<std::uint64_t>(
                val, [](const std::string& s) { return std::stoull(s); });
        else if (key == "samples") c.n_samples = parse_long(val);
        else if (key == "gamma") c.gamma = parse_double(val);
        else if (key == "lr") c.lr = parse_double(val);
        else if (key == "max_steps") c.max_steps = as_int();
        else if (key == "grad_tol") c.grad_tol = parse_double(val);
        else if (key == "planner") c.planner = val;
        else if (key == "lstd_samples") c.lstd.samples_per_policy = as_int();
        else if (key == "lstd_iterations") c.lstd.n_iterations = as_int();
        else if (key == "lstd_ridge") c.lstd.ridge = parse_double(val);
        else if (key == "lstd_expected_next") c.lstd.expected_next_state = parse_long(val) != 0;
        else if (key == "jobs") c.jobs = as_int();
        else if (key == "out") c.out = val;
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream f = open_in(path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config_text(os.str());
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

inline Environment build_environment(const ExperimentConfig& c) {
    if (c.env == "three_state") return build_toy_mdp(c.gamma);
    GridSpec g;
    g.env_kind = c.env == "catch" ? EnvKind::catch_game : EnvKind::four_rooms;
    g.width = c.width > 0 ? c.width : (c.env == "catch" ? 5 : 11);
    g.height = c.height > 0 ? c.height : (c.env == "catch" ? 10 : 11);
    g.slip_prob = c.slip;
    g.reward_value = c.reward_value;
    g.goal_row = c.goal_row;
    g.goal_col = c.goal_col;
    g.gamma = c.gamma;
    return c.env == "catch" ? build_catch(g) : build_four_rooms(g);
}

// collect -> fit reward + train transitions -> plan -> evaluate exactly.
// Every random stage derives its own stream from the run seed, so a row is
// a pure function of (config, method, rank, dim_v, seed).
inline ExperimentResult run_single(const ExperimentConfig& cfg, const Environment& env,
                                   const std::string& method, int rank, int dim_v,
                                   std::uint64_t seed) {
    ExperimentResult res;
    res.env = env.name;
    res.method = method;
    res.strategy = cfg.strategy;
    res.rank = rank;
    res.dim_v = dim_v;
    res.seed = seed;

    std::string stage = "collect";
    try {
        const TransitionDataset dataset = collect_dataset(env, cfg.n_samples, derive_seed(seed, 1));

        stage = "features";
        const FunctionSet vset =
            cfg.strategy == "basis"
                ? kmeans_aggregation(env.coordinates, dim_v, derive_seed(seed, 2))
                : value_polytope_set(env.mdp, dim_v, derive_seed(seed, 2));

        stage = "train";
        FactorizedModel model =
            init_model(env.mdp.n_states(), env.mdp.n_actions(), rank, derive_seed(seed, 3),
                       cfg.gamma);
        model.reward_table = fit_reward(dataset);
        const TrainObjective objective =
            method == "mle" ? TrainObjective::mle() : TrainObjective::ve(vset);
        AdamState adam(cfg.lr);
        const TrainReport report =
            train(model, dataset, objective, adam, cfg.max_steps, cfg.grad_tol);

        stage = "plan";
        std::string planner = cfg.planner;
        if (planner == "auto")
            planner = cfg.strategy == "basis" ? "lstd_pi" : "value_iteration";
        TabularPolicy policy;
        if (planner == "value_iteration") {
            policy = plan_value_iteration(model);
        } else {
            LstdConfig lstd = cfg.lstd;
            lstd.rng_seed = derive_seed(seed, 4);
            policy = policy_iteration_lstd(model, vset, lstd, env.mdp);
        }

        stage = "evaluate";
        res.mean_value = evaluate_policy_mean(env.mdp, policy);
        res.final_loss = report.final_loss;
        res.steps = report.steps;
    } catch (const std::exception& e) {
        throw std::runtime_error("stage " + stage + ": " + e.what());
    }
    return res;
}

inline ExperimentResult run_single(const ExperimentConfig& cfg, const std::string& method,
                                   int rank, int dim_v, std::uint64_t seed) {
    const Environment env = build_environment(cfg);
    return run_single(cfg, env, method, rank, dim_v, seed);
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepRun {
    ExperimentResult result;
    bool ok = false;
    std::string error;
};

struct SweepSummaryRow {
    std::string env, method, strategy;
    int rank = 0, dim_v = 0, n_seeds = 0;
    double mean_value = 0.0;
    double sd_value = 0.0;  // population standard deviation over seeds
};

struct SweepOutput {
    std::vector<SweepRun> runs;  // methods x ranks x dims x seeds, row-major
    std::vector<SweepSummaryRow> summary;

    bool all_ok() const {
        for (const SweepRun& r : runs)
            if (!r.ok) return false;
        return true;
    }
};

namespace detail {

inline int resolve_jobs(int requested, std::size_t n_cells) {
    const char* det = std::getenv("VEQ_DETERMINISTIC");
    if (det != nullptr && std::string(det) == "1") return 1;
    int jobs = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    if (jobs < 1) jobs = 1;
    return std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(n_cells, 1)));
}

}  // namespace detail

// Both methods x ranks x dims x seeds. Rows land in a fixed row-indexed
// order regardless of scheduling; failures are recorded per row and do not
// stop the sweep.
inline SweepOutput run_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    const Environment env = build_environment(cfg);
    const std::vector<std::string> methods{"mle", "ve"};

    struct Cell {
        std::string method;
        int rank, dim_v;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const std::string& m : methods)
        for (int k : cfg.ranks)
            for (int d : cfg.dims)
                for (std::uint64_t s : cfg.seeds) cells.push_back({m, k, d, s});

    SweepOutput out;
    out.runs.resize(cells.size());
    std::mutex log_mutex;

    auto work = [&](std::size_t i) {
        const Cell& c = cells[i];
        SweepRun& run = out.runs[i];
        try {
            run.result = run_single(cfg, env, c.method, c.rank, c.dim_v, c.seed);
            run.ok = true;
        } catch (const std::exception& e) {
            run.result.env = env.name;
            run.result.method = c.method;
            run.result.strategy = cfg.strategy;
            run.result.rank = c.rank;
            run.result.dim_v = c.dim_v;
            run.result.seed = c.seed;
            run.ok = false;
            run.error = e.what();
        }
        if (log != nullptr) {
            const std::lock_guard<std::mutex> lock(log_mutex);
            *log << "row " << i + 1 << "/" << cells.size() << " " << c.method << " k=" << c.rank
                 << " d=" << c.dim_v << " seed=" << c.seed
                 << (run.ok ? " mean_value=" + format_sig10(run.result.mean_value)
                            : " FAILED: " + run.error)
                 << '\n';
        }
    };

    const int jobs = detail::resolve_jobs(cfg.jobs, cells.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        for (int t = 0; t < jobs; ++t)
            workers.emplace_back([&]() {
                for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
                    work(i);
            });
        for (std::thread& t : workers) t.join();
    }

    // Per-(method, rank, dim_v) mean and population standard deviation.
    for (const std::string& m : methods)
        for (int k : cfg.ranks)
            for (int d : cfg.dims) {
                std::vector<double> vals;
                for (const SweepRun& r : out.runs)
                    if (r.ok && r.result.method == m && r.result.rank == k &&
                        r.result.dim_v == d)
                        vals.push_back(r.result.mean_value);
                SweepSummaryRow row;
                row.env = env.name;
                row.method = m;
                row.strategy = cfg.strategy;
                row.rank = k;
                row.dim_v = d;
                row.n_seeds = static_cast<int>(vals.size());
                if (!vals.empty()) {
                    double sum = 0.0;
                    for (double v : vals) sum += v;
                    row.mean_value = sum / static_cast<double>(vals.size());
                    // Two-pass variance: the textbook E[x^2] - E[x]^2 form
                    // cancels catastrophically when seeds nearly agree.
                    double var = 0.0;
                    for (double v : vals) var += (v - row.mean_value) * (v - row.mean_value);
                    row.sd_value = std::sqrt(var / static_cast<double>(vals.size()));
                }
                out.summary.push_back(row);
            }
    return out;
}

// Writes results.csv, summary.csv, per-slice plot files, and the resolved
// config snapshot into `dir`.
inline void write_sweep_outputs(const std::string& dir, const ExperimentConfig& cfg,
                                const SweepOutput& sweep) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f = open_out(dir + "/results.csv");
        f << experiment_csv_header() << '\n';
        for (const SweepRun& r : sweep.runs)
            if (r.ok) f << to_csv_row(r.result) << '\n';
    }
    {
        std::ofstream f = open_out(dir + "/summary.csv");
        f << "env,method,strategy,rank,dim_v,n_seeds,mean_value,sd_value\n";
        for (const SweepSummaryRow& s : sweep.summary)
            f << s.env << ',' << s.method << ',' << s.strategy << ',' << s.rank << ',' << s.dim_v
              << ',' << s.n_seeds << ',' << format_sig10(s.mean_value) << ','
              << format_sig10(s.sd_value) << '\n';
    }

    auto find_summary = [&](const std::string& m, int k, int d) -> const SweepSummaryRow* {
        for (const SweepSummaryRow& s : sweep.summary)
            if (s.method == m && s.rank == k && s.dim_v == d) return &s;
        return nullptr;
    };
    for (int d : cfg.dims) {
        std::ofstream f = open_out(dir + "/plot_vs_rank_dim" + std::to_string(d) + ".csv");
        f << "x,mean_mle,sd_mle,mean_ve,sd_ve\n";
        for (int k : cfg.ranks) {
            const SweepSummaryRow* mle = find_summary("mle", k, d);
            const SweepSummaryRow* ve = find_summary("ve", k, d);
            f << k << ',' << format_sig10(mle ? mle->mean_value : 0.0) << ','
              << format_sig10(mle ? mle->sd_value : 0.0) << ','
              << format_sig10(ve ? ve->mean_value : 0.0) << ','
              << format_sig10(ve ? ve->sd_value : 0.0) << '\n';
        }
    }
    for (int k : cfg.ranks) {
        std::ofstream f = open_out(dir + "/plot_vs_dim_rank" + std::to_string(k) + ".csv");
        f << "x,mean_mle,sd_mle,mean_ve,sd_ve\n";
        for (int d : cfg.dims) {
            const SweepSummaryRow* mle = find_summary("mle", k, d);
            const SweepSummaryRow* ve = find_summary("ve", k, d);
            f << d << ',' << format_sig10(mle ? mle->mean_value : 0.0) << ','
              << format_sig10(mle ? mle->sd_value : 0.0) << ','
              << format_sig10(ve ? ve->mean_value : 0.0) << ','
              << format_sig10(ve ? ve->sd_value : 0.0) << '\n';
        }
    }
    {
        std::ofstream f = open_out(dir + "/config.txt");
        f << serialize_config(cfg);
    }
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

// Runs every numerical check plus the finite-difference gradient audit;
// prints one row per check and returns 0 iff everything passed.
// fault_injection corrupts one analytic gradient tensor to prove the
// finite-difference audit can fail.
inline int verify_all(std::uint64_t seed, bool fault_injection, std::ostream& out) {
    std::vector<CheckReport> reports;
    reports.push_back(check_sandwich_rank(100, derive_seed(seed, 11)));
    {
        CheckReport r = check_dimension_bound(3, 2, 2, 3, derive_seed(seed, 12));
        r.name += " (m=|A|, k=|S|)";
        reports.push_back(std::move(r));
    }
    {
        CheckReport r = check_dimension_bound(3, 2, 1, 2, derive_seed(seed, 13));
        r.name += " (m=1, k=2)";
        reports.push_back(std::move(r));
    }
    {
        CheckReport r = check_dimension_bound(3, 2, 0, 3, derive_seed(seed, 14));
        r.name += " (no policies)";
        reports.push_back(std::move(r));
    }
    reports.push_back(check_mle_counterexample(4, derive_seed(seed, 15)));
    reports.push_back(check_toy_closure(50, derive_seed(seed, 16)));
    reports.push_back(check_exact_ve_example());
    reports.push_back(check_approx_ve_example());
    reports.push_back(check_monotonicity_properties(derive_seed(seed, 17)));
    reports.push_back(check_gradient_fd(derive_seed(seed, 18), fault_injection));
    {
        // Negative control: corrupt one analytic gradient entry and require
        // the audit to notice, proving it is not vacuously green.
        const CheckReport corrupted = check_gradient_fd(derive_seed(seed, 19), true);
        CheckReport control;
        control.name = "gradient_fault_injection_control";
        control.require(!corrupted.passed,
                        "corrupted analytic gradient trips the finite-difference audit");
        reports.push_back(std::move(control));
    }

    bool all = true;
    for (const CheckReport& r : reports) {
        all = all && r.passed;
        out << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << '\n';
        for (const std::string& d : r.details) out << "       " << d << '\n';
    }
    out << (all ? "all checks passed" : "CHECKS FAILED") << '\n';
    return all ? 0 : 1;
}

}  // namespace veq
