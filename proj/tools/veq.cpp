// Command-line driver: collect experience, train factorized transition
// models by likelihood or value-equivalence fitting, plan with the learned
// model, evaluate policies exactly, run end-to-end experiments and sweeps,
// and run the numerical verification suite.
//
// Set VEQ_DETERMINISTIC=1 to force serial sweep execution; results are
// byte-identical either way.

#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "veq/experiment.hpp"

namespace {

// Binds CLI flags onto an ExperimentConfig with config-file support:
// --config loads the file first, then any flag given on the command line
// overrides the loaded value.
class ConfigBinder {
  public:
    explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {
        cmd_->add_option("--config", config_path_,
                         "key=value config file; explicit flags override its values")
            ->check(CLI::ExistingFile);
    }

    template <class T>
    void bind(const std::string& flag, T veq::ExperimentConfig::*field,
              const std::string& help) {
        auto storage = std::make_shared<T>();
        CLI::Option* opt = cmd_->add_option(flag, *storage, help);
        appliers_.push_back([opt, storage, field](veq::ExperimentConfig& c) {
            if (opt->count() > 0) c.*field = *storage;
        });
    }

    template <class T>
    void bind_list(const std::string& flag, std::vector<T> veq::ExperimentConfig::*field,
                   const std::string& help) {
        auto storage = std::make_shared<std::vector<T>>();
        CLI::Option* opt = cmd_->add_option(flag, *storage, help)->delimiter(',');
        appliers_.push_back([opt, storage, field](veq::ExperimentConfig& c) {
            if (opt->count() > 0) c.*field = *storage;
        });
    }

    // Singular convenience flags (--rank/--dim-v/--seed) for one-cell runs.
    void bind_singletons() {
        auto rank = std::make_shared<int>(0);
        CLI::Option* ro = cmd_->add_option("--rank", *rank, "model rank k");
        appliers_.push_back([ro, rank](veq::ExperimentConfig& c) {
            if (ro->count() > 0) c.ranks = {*rank};
        });
        auto dim = std::make_shared<int>(0);
        CLI::Option* dv = cmd_->add_option("--dim-v", *dim, "value-function set size d");
        appliers_.push_back([dv, dim](veq::ExperimentConfig& c) {
            if (dv->count() > 0) c.dims = {*dim};
        });
        auto seed = std::make_shared<std::uint64_t>(0);
        CLI::Option* so = cmd_->add_option("--seed", *seed, "run seed");
        appliers_.push_back([so, seed](veq::ExperimentConfig& c) {
            if (so->count() > 0) c.seeds = {*seed};
        });
    }

    void bind_environment() {
        bind("--env", &veq::ExperimentConfig::env, "environment: catch, four_rooms, three_state");
        bind("--width", &veq::ExperimentConfig::width, "grid width (0 = environment default)");
        bind("--height", &veq::ExperimentConfig::height, "grid height (0 = environment default)");
        bind("--slip", &veq::ExperimentConfig::slip, "four_rooms slip probability");
        bind("--reward", &veq::ExperimentConfig::reward_value, "goal / catch reward value");
        bind("--goal-row", &veq::ExperimentConfig::goal_row, "four_rooms goal row");
        bind("--goal-col", &veq::ExperimentConfig::goal_col, "four_rooms goal column (-1 = last)");
        bind("--gamma", &veq::ExperimentConfig::gamma, "discount factor");
    }

    void bind_training() {
        bind("--method", &veq::ExperimentConfig::method, "training loss: mle or ve");
        bind("--strategy", &veq::ExperimentConfig::strategy,
             "value-function set: basis or value_polytope");
        bind("--samples", &veq::ExperimentConfig::n_samples, "experience tuples to collect");
        bind("--lr", &veq::ExperimentConfig::lr, "Adam learning rate");
        bind("--max-steps", &veq::ExperimentConfig::max_steps, "gradient step budget");
        bind("--grad-tol", &veq::ExperimentConfig::grad_tol,
             "stop when the gradient sup-norm drops below this");
    }

    void bind_planning() {
        bind("--planner", &veq::ExperimentConfig::planner,
             "auto, value_iteration, or lstd_pi (auto follows the strategy)");
        auto ls = std::make_shared<int>(0);
        CLI::Option* lso = cmd_->add_option("--lstd-samples", *ls, "experience per lstd round");
        appliers_.push_back([lso, ls](veq::ExperimentConfig& c) {
            if (lso->count() > 0) c.lstd.samples_per_policy = *ls;
        });
        auto li = std::make_shared<int>(0);
        CLI::Option* lio = cmd_->add_option("--lstd-iterations", *li, "policy-iteration rounds");
        appliers_.push_back([lio, li](veq::ExperimentConfig& c) {
            if (lio->count() > 0) c.lstd.n_iterations = *li;
        });
        auto lr2 = std::make_shared<double>(0.0);
        CLI::Option* lro = cmd_->add_option("--lstd-ridge", *lr2, "lstd ridge regularizer");
        appliers_.push_back([lro, lr2](veq::ExperimentConfig& c) {
            if (lro->count() > 0) c.lstd.ridge = *lr2;
        });
        auto le = std::make_shared<bool>(false);
        CLI::Option* leo =
            cmd_->add_flag("--lstd-expected", *le, "use expected model next-state features");
        appliers_.push_back([leo, le](veq::ExperimentConfig& c) {
            if (leo->count() > 0) c.lstd.expected_next_state = *le;
        });
    }

    veq::ExperimentConfig resolve() const {
        veq::ExperimentConfig cfg;
        if (!config_path_.empty()) cfg = veq::load_config_file(config_path_);
        for (const auto& apply : appliers_) apply(cfg);
        return cfg;
    }

  private:
    CLI::App* cmd_;
    std::string config_path_;
    std::vector<std::function<void(veq::ExperimentConfig&)>> appliers_;
};

int first(const std::vector<int>& xs) { return xs.front(); }
std::uint64_t first(const std::vector<std::uint64_t>& xs) { return xs.front(); }

void write_policy_csv(const std::string& path, const veq::TabularPolicy& policy) {
    std::ofstream f = veq::open_out(path);
    f << "s,action\n";
    for (int s = 0; s < policy.probs.rows(); ++s) {
        Eigen::Index a = 0;
        policy.probs.row(s).maxCoeff(&a);
        f << s << ',' << a << '\n';
    }
}

veq::TabularPolicy read_policy_csv(const std::string& path, int n_states, int n_actions) {
    std::ifstream f = veq::open_in(path);
    std::string line;
    if (!std::getline(f, line) ||
        veq::split_csv_line(line) != std::vector<std::string>{"s", "action"})
        throw std::runtime_error("bad policy header in " + path);
    std::vector<int> actions(static_cast<std::size_t>(n_states), -1);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto fields = veq::split_csv_line(line);
        if (fields.size() != 2) throw std::runtime_error("bad policy row in " + path);
        const long s = veq::parse_long(fields[0]);
        if (s < 0 || s >= n_states) throw std::runtime_error("policy state out of range");
        actions[static_cast<std::size_t>(s)] = static_cast<int>(veq::parse_long(fields[1]));
    }
    for (int s = 0; s < n_states; ++s)
        if (actions[static_cast<std::size_t>(s)] < 0)
            throw std::runtime_error("policy file misses state " + std::to_string(s));
    return veq::TabularPolicy::deterministic(actions, n_actions);
}

veq::FunctionSet build_function_set(const veq::ExperimentConfig& cfg, const veq::Environment& env,
                                    int dim_v, std::uint64_t seed) {
    return cfg.strategy == "basis"
               ? veq::kmeans_aggregation(env.coordinates, dim_v, veq::derive_seed(seed, 2))
               : veq::value_polytope_set(env.mdp, dim_v, veq::derive_seed(seed, 2));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Learn tabular transition models by maximum likelihood or "
        "value-equivalent fitting, plan with them, and verify the theory "
        "numerically. Set VEQ_DETERMINISTIC=1 to force serial sweeps."};
    app.require_subcommand(1);
    int exit_code = 0;

    // ---- collect ----------------------------------------------------------
    auto* collect = app.add_subcommand("collect", "Sample experience and write a dataset CSV");
    auto collect_cfg = std::make_shared<ConfigBinder>(collect);
    collect_cfg->bind_environment();
    collect_cfg->bind("--samples", &veq::ExperimentConfig::n_samples, "tuples to collect");
    collect_cfg->bind_singletons();
    auto collect_out = std::make_shared<std::string>();
    collect->add_option("--out", *collect_out, "output dataset CSV")->required();
    collect->callback([collect_cfg, collect_out]() {
        const veq::ExperimentConfig cfg = collect_cfg->resolve();
        cfg.validate();
        const veq::Environment env = veq::build_environment(cfg);
        const std::uint64_t seed = first(cfg.seeds);
        const veq::TransitionDataset data =
            veq::collect_dataset(env, cfg.n_samples, veq::derive_seed(seed, 1));
        veq::save_dataset_csv(*collect_out, data);
        int visited = 0;
        for (int a = 0; a < env.mdp.n_actions(); ++a)
            visited += static_cast<int>(data.visited_states(a).size());
        std::cout << "wrote " << data.tuples().size() << " tuples from " << env.name << " ("
                  << env.mdp.n_states() << " states) to " << *collect_out << "; " << visited
                  << " visited (s,a) pairs\n";
    });

    // ---- train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Fit a factorized model and save a checkpoint");
    auto train_cfg = std::make_shared<ConfigBinder>(train_cmd);
    train_cfg->bind_environment();
    train_cfg->bind_training();
    train_cfg->bind_singletons();
    auto train_out = std::make_shared<std::string>();
    auto train_data = std::make_shared<std::string>();
    train_cmd->add_option("--out", *train_out, "checkpoint directory")->required();
    train_cmd->add_option("--data", *train_data, "reuse a collected dataset CSV")
        ->check(CLI::ExistingFile);
    train_cmd->callback([train_cfg, train_out, train_data]() {
        const veq::ExperimentConfig cfg = train_cfg->resolve();
        cfg.validate();
        const veq::Environment env = veq::build_environment(cfg);
        const std::uint64_t seed = first(cfg.seeds);
        const veq::TransitionDataset data =
            train_data->empty()
                ? veq::collect_dataset(env, cfg.n_samples, veq::derive_seed(seed, 1))
                : veq::load_dataset_csv(*train_data, env.mdp.n_states(), env.mdp.n_actions());

        veq::FactorizedModel model =
            veq::init_model(env.mdp.n_states(), env.mdp.n_actions(), first(cfg.ranks),
                            veq::derive_seed(seed, 3), cfg.gamma);
        model.reward_table = veq::fit_reward(data);
        veq::FunctionSet vset;
        veq::TrainObjective objective = veq::TrainObjective::mle();
        if (cfg.method == "ve") {
            vset = build_function_set(cfg, env, first(cfg.dims), seed);
            objective = veq::TrainObjective::ve(vset);
        }
        veq::AdamState adam(cfg.lr);
        const veq::TrainReport report =
            veq::train(model, data, objective, adam, cfg.max_steps, cfg.grad_tol);

        veq::CheckpointMeta meta;
        meta.seed = seed;
        meta.objective = cfg.method;
        veq::save_checkpoint(*train_out, model, meta);
        std::cout << "trained " << cfg.method << " model (k=" << model.rank() << ") on "
                  << env.name << ": final_loss=" << veq::format_sig10(report.final_loss)
                  << " grad_inf=" << veq::format_sig10(report.grad_inf_norm)
                  << " steps=" << report.steps << " wall=" << veq::format_sig10(report.wall_time_sec)
                  << "s -> " << *train_out << '\n';
    });

    // ---- plan -------------------------------------------------------------
    auto* plan_cmd = app.add_subcommand("plan", "Derive a greedy policy from a checkpoint");
    auto plan_cfg = std::make_shared<ConfigBinder>(plan_cmd);
    plan_cfg->bind_environment();
    plan_cfg->bind("--strategy", &veq::ExperimentConfig::strategy,
                   "feature construction for lstd_pi: basis or value_polytope");
    plan_cfg->bind_planning();
    plan_cfg->bind_singletons();
    auto plan_ckpt = std::make_shared<std::string>();
    auto plan_out = std::make_shared<std::string>();
    plan_cmd->add_option("--checkpoint", *plan_ckpt, "checkpoint directory")->required();
    plan_cmd->add_option("--out", *plan_out, "output policy CSV")->required();
    plan_cmd->callback([plan_cfg, plan_ckpt, plan_out]() {
        const veq::ExperimentConfig cfg = plan_cfg->resolve();
        cfg.validate();
        auto [model, meta] = veq::load_checkpoint(*plan_ckpt);
        std::string planner = cfg.planner;
        if (planner == "auto")
            planner = cfg.strategy == "basis" ? "lstd_pi" : "value_iteration";
        veq::TabularPolicy policy;
        if (planner == "value_iteration") {
            policy = veq::plan_value_iteration(model);
        } else {
            const veq::Environment env = veq::build_environment(cfg);
            if (env.mdp.n_states() != model.n_states() ||
                env.mdp.n_actions() != model.n_actions())
                throw std::runtime_error("checkpoint shape does not match --env");
            const std::uint64_t seed = first(cfg.seeds);
            const veq::FunctionSet vset = build_function_set(cfg, env, first(cfg.dims), seed);
            veq::LstdConfig lstd = cfg.lstd;
            lstd.rng_seed = veq::derive_seed(seed, 4);
            policy = veq::policy_iteration_lstd(model, vset, lstd, env.mdp);
        }
        write_policy_csv(*plan_out, policy);
        std::cout << "planned with " << planner << " over " << model.n_states()
                  << " states -> " << *plan_out << '\n';
    });

    // ---- eval -------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a policy CSV exactly on the true MDP");
    auto eval_cfg = std::make_shared<ConfigBinder>(eval_cmd);
    eval_cfg->bind_environment();
    auto eval_policy = std::make_shared<std::string>();
    auto eval_out = std::make_shared<std::string>();
    auto eval_rollouts = std::make_shared<int>(0);
    auto eval_horizon = std::make_shared<int>(2000);
    auto eval_seed = std::make_shared<std::uint64_t>(0);
    eval_cmd->add_option("--policy", *eval_policy, "policy CSV (s,action)")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", *eval_out, "optional per-state value CSV");
    eval_cmd->add_option("--rollouts", *eval_rollouts,
                         "also Monte-Carlo cross-check with this many episodes");
    eval_cmd->add_option("--horizon", *eval_horizon, "rollout episode length");
    eval_cmd->add_option("--seed", *eval_seed, "rollout seed");
    eval_cmd->callback([eval_cfg, eval_policy, eval_out, eval_rollouts, eval_horizon,
                        eval_seed]() {
        const veq::ExperimentConfig cfg = eval_cfg->resolve();
        cfg.validate();
        const veq::Environment env = veq::build_environment(cfg);
        const veq::TabularPolicy policy =
            read_policy_csv(*eval_policy, env.mdp.n_states(), env.mdp.n_actions());
        const Eigen::VectorXd values = veq::evaluate_exact(env.mdp, policy);
        std::cout << "mean_value=" << veq::format_sig10(values.mean()) << '\n';
        if (*eval_rollouts > 0) {
            const double mc = veq::evaluate_policy_rollout(env.mdp, env.entry_reward, policy,
                                                           *eval_rollouts, *eval_horizon,
                                                           *eval_seed);
            std::cout << "rollout_mean=" << veq::format_sig10(mc) << " (" << *eval_rollouts
                      << " episodes, horizon " << *eval_horizon << ")\n";
        }
        if (!eval_out->empty()) {
            std::ofstream f = veq::open_out(*eval_out);
            f << "s,value\n";
            for (Eigen::Index s = 0; s < values.size(); ++s)
                f << s << ',' << veq::format_exact(values[s]) << '\n';
        }
    });

    // ---- run --------------------------------------------------------------
    auto* run_cmd =
        app.add_subcommand("run", "One end-to-end run: collect, train, plan, evaluate");
    auto run_cfg = std::make_shared<ConfigBinder>(run_cmd);
    run_cfg->bind_environment();
    run_cfg->bind_training();
    run_cfg->bind_planning();
    run_cfg->bind_singletons();
    auto run_out = std::make_shared<std::string>();
    run_cmd->add_option("--out", *run_out, "optional CSV file for the result row");
    run_cmd->callback([run_cfg, run_out]() {
        const veq::ExperimentConfig cfg = run_cfg->resolve();
        cfg.validate();
        const veq::ExperimentResult res = veq::run_single(
            cfg, cfg.method, first(cfg.ranks), first(cfg.dims), first(cfg.seeds));
        std::cout << veq::experiment_csv_header() << '\n' << veq::to_csv_row(res) << '\n';
        if (!run_out->empty()) {
            std::ofstream f = veq::open_out(*run_out);
            f << veq::experiment_csv_header() << '\n' << veq::to_csv_row(res) << '\n';
        }
    });

    // ---- sweep ------------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand(
        "sweep", "Both methods x ranks x dims x seeds; writes results, summaries, plot tables");
    auto sweep_cfg = std::make_shared<ConfigBinder>(sweep_cmd);
    sweep_cfg->bind_environment();
    sweep_cfg->bind_training();
    sweep_cfg->bind_planning();
    sweep_cfg->bind_list("--ranks", &veq::ExperimentConfig::ranks, "model ranks, comma-separated");
    sweep_cfg->bind_list("--dims", &veq::ExperimentConfig::dims,
                         "value-set sizes, comma-separated");
    sweep_cfg->bind_list("--seeds", &veq::ExperimentConfig::seeds, "run seeds, comma-separated");
    sweep_cfg->bind("--jobs", &veq::ExperimentConfig::jobs, "worker threads (0 = all cores)");
    auto sweep_out = std::make_shared<std::string>();
    sweep_cmd->add_option("--out", *sweep_out, "output directory")->required();
    sweep_cmd->callback([sweep_cfg, sweep_out, &exit_code]() {
        veq::ExperimentConfig cfg = sweep_cfg->resolve();
        cfg.out = *sweep_out;
        cfg.validate();
        const veq::SweepOutput sweep = veq::run_sweep(cfg, &std::cerr);
        veq::write_sweep_outputs(*sweep_out, cfg, sweep);
        int failed = 0;
        for (const veq::SweepRun& r : sweep.runs)
            if (!r.ok) ++failed;
        std::cout << "sweep: " << sweep.runs.size() - failed << "/" << sweep.runs.size()
                  << " runs ok -> " << *sweep_out << '\n';
        if (failed > 0) {
            std::cerr << failed << " runs failed; their rows are absent from results.csv\n";
            exit_code = 1;
        }
    });

    // ---- verify -----------------------------------------------------------
    auto* verify_cmd =
        app.add_subcommand("verify", "Run every numerical check and the gradient audit");
    auto verify_seed = std::make_shared<std::uint64_t>(0);
    auto verify_fault = std::make_shared<bool>(false);
    verify_cmd->add_option("--seed", *verify_seed, "base seed for the randomized checks");
    verify_cmd->add_flag("--fault-injection", *verify_fault,
                         "corrupt one analytic gradient so the audit must fail (demonstration)");
    verify_cmd->callback([verify_seed, verify_fault, &exit_code]() {
        exit_code = veq::verify_all(*verify_seed, *verify_fault, std::cout);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return exit_code;
}
