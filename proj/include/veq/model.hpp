#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "veq/csv.hpp"
#include "veq/env.hpp"
#include "veq/function_sets.hpp"
#include "veq/mdp.hpp"
#include "veq/rng.hpp"

namespace veq {

// Numerically stable row-wise softmax.
inline Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
    out.array().colwise() /= out.rowwise().sum().array();
    return out;
}

// Pull a loss gradient w.r.t. softmax outputs back to the logits:
// df_j = p_j * (g_j - sum_i g_i p_i), applied row by row.
inline void row_softmax_backprop(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& grad_probs,
                                 Eigen::MatrixXd& grad_logits) {
    const Eigen::VectorXd dots = (grad_probs.array() * probs.array()).rowwise().sum();
    grad_logits = (probs.array() * (grad_probs.array().colwise() - dots.array())).matrix();
}

// Learnable transition model with rank-k rows: P^a = D^a K^a where
// D^a = rowsoftmax(F_D^a) is |S| x k and K^a = rowsoftmax(F_K^a) is
// k x |S|. Rows of D, K, and P are strictly positive and sum to 1 by
// construction, and rank(P^a) <= k. The reward table is fitted separately
// and is constant w.r.t. the transition parameters.
class FactorizedModel final : public ModelView {
  public:
    FactorizedModel(int n_states, int n_actions, int k, double gamma)
        : n_states_(n_states), n_actions_(n_actions), rank_(k), gamma_(gamma) {
        if (n_states < 1 || n_actions < 1 || k < 1)
            throw std::invalid_argument("model dimensions must be positive");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
        f_d.assign(static_cast<std::size_t>(n_actions), Eigen::MatrixXd::Zero(n_states, k));
        f_k.assign(static_cast<std::size_t>(n_actions), Eigen::MatrixXd::Zero(k, n_states));
        reward_table = Eigen::MatrixXd::Zero(n_states, n_actions);
        refresh();
    }

    // Free logits; call refresh() after mutating them.
    std::vector<Eigen::MatrixXd> f_d;
    std::vector<Eigen::MatrixXd> f_k;
    Eigen::MatrixXd reward_table;

    int rank() const { return rank_; }

    // Recomputes the stochastic factors from the logits.
    void refresh() {
        d_.resize(static_cast<std::size_t>(n_actions_));
        k_.resize(static_cast<std::size_t>(n_actions_));
        for (int a = 0; a < n_actions_; ++a) {
            d_[static_cast<std::size_t>(a)] = row_softmax(f_d[static_cast<std::size_t>(a)]);
            k_[static_cast<std::size_t>(a)] = row_softmax(f_k[static_cast<std::size_t>(a)]);
        }
        p_dirty_.assign(static_cast<std::size_t>(n_actions_), true);
    }

    const Eigen::MatrixXd& d_factor(int a) const { return d_[static_cast<std::size_t>(a)]; }
    const Eigen::MatrixXd& k_factor(int a) const { return k_[static_cast<std::size_t>(a)]; }

    int n_states() const override { return n_states_; }
    int n_actions() const override { return n_actions_; }
    double gamma() const override { return gamma_; }
    const Eigen::MatrixXd& reward() const override { return reward_table; }

    // Materialized product D^a K^a, cached until the next refresh().
    const Eigen::MatrixXd& transition(int a) const override {
        auto ai = static_cast<std::size_t>(a);
        if (p_.size() != static_cast<std::size_t>(n_actions_))
            p_.assign(static_cast<std::size_t>(n_actions_), Eigen::MatrixXd());
        if (p_dirty_[ai]) {
            p_[ai].noalias() = d_[ai] * k_[ai];
            p_dirty_[ai] = false;
        }
        return p_[ai];
    }

  private:
    int n_states_;
    int n_actions_;
    int rank_;
    double gamma_;
    std::vector<Eigen::MatrixXd> d_;
    std::vector<Eigen::MatrixXd> k_;
    mutable std::vector<Eigen::MatrixXd> p_;
    mutable std::vector<bool> p_dirty_;
};

// Logits uniform in [-1, 1], filled row-major per action (F_D then F_K);
// reward table zero. Bit-reproducible for a given seed.
inline FactorizedModel init_model(int n_states, int n_actions, int k, std::uint64_t rng_seed,
                                  double gamma = 0.99) {
    FactorizedModel model(n_states, n_actions, k, gamma);
    Rng rng(rng_seed);
    for (int a = 0; a < n_actions; ++a) {
        Eigen::MatrixXd& fd = model.f_d[static_cast<std::size_t>(a)];
        for (int s = 0; s < n_states; ++s)
            for (int j = 0; j < k; ++j) fd(s, j) = rng.uniform_real(-1.0, 1.0);
        Eigen::MatrixXd& fk = model.f_k[static_cast<std::size_t>(a)];
        for (int z = 0; z < k; ++z)
            for (int s = 0; s < n_states; ++s) fk(z, s) = rng.uniform_real(-1.0, 1.0);
    }
    model.refresh();
    return model;
}

// Empirical mean reward per (s, a); unvisited cells are 0. This is the
// exact minimizer of the squared reward loss on the data.
inline Eigen::MatrixXd fit_reward(const TransitionDataset& dataset) {
    return dataset.reward_mean();
}

// Gradient buffers aligned with FactorizedModel logits.
struct ModelGrads {
    std::vector<Eigen::MatrixXd> f_d;
    std::vector<Eigen::MatrixXd> f_k;

    void init_like(const FactorizedModel& m) {
        f_d.assign(m.f_d.size(), Eigen::MatrixXd::Zero(m.f_d[0].rows(), m.f_d[0].cols()));
        f_k.assign(m.f_k.size(), Eigen::MatrixXd::Zero(m.f_k[0].rows(), m.f_k[0].cols()));
    }

    double inf_norm() const {
        double n = 0.0;
        for (const auto& g : f_d) n = std::max(n, g.lpNorm<Eigen::Infinity>());
        for (const auto& g : f_k) n = std::max(n, g.lpNorm<Eigen::Infinity>());
        return n;
    }
};

// Negative log-likelihood of the observed transitions:
//   loss = - sum_{s,a,s'} N(s,a,s') log P^a(s,s').
// Gradients (optional) flow through the product D K and both softmaxes;
// they accumulate in place into the caller's buffers (no allocation).
inline double mle_loss_and_grad(const FactorizedModel& model, const TransitionDataset& dataset,
                                ModelGrads* grads = nullptr) {
    if (dataset.tuples().empty() && dataset.visit_counts().sum() == 0.0)
        throw std::invalid_argument("dataset is empty");
    double loss = 0.0;
    for (int a = 0; a < model.n_actions(); ++a) {
        const auto ai = static_cast<std::size_t>(a);
        const Eigen::MatrixXd& d = model.d_factor(a);
        const Eigen::MatrixXd& k = model.k_factor(a);
        if (grads) {
            grads->f_d[ai].setZero();
            grads->f_k[ai].setZero();
        }
        for (const CountCell& cell : dataset.count_cells(a)) {
            const double p = d.row(cell.s).dot(k.col(cell.s_next));
            loss -= cell.count * std::log(p);
            if (grads) {
                const double coef = -cell.count / p;
                grads->f_d[ai].row(cell.s) += coef * k.col(cell.s_next).transpose();
                grads->f_k[ai].col(cell.s_next) += coef * d.row(cell.s).transpose();
            }
        }
        if (grads) {
            // backprop is entrywise given the row dot products, so writing
            // over the accumulated factor gradients is safe
            row_softmax_backprop(d, grads->f_d[ai], grads->f_d[ai]);
            row_softmax_backprop(k, grads->f_k[ai], grads->f_k[ai]);
        }
    }
    return loss;
}

namespace detail {

// Fixed per-action quantities of the value-equivalence loss. target[a] is
// C = (Rbar - Rmodel) + gamma * Pbar * V broadcast over columns, row_weight
// masks unvisited states (and optionally weights by visit counts), and
// cluster_of enables the sparse path when V is an indicator basis.
struct VeStats {
    std::vector<Eigen::MatrixXd> target;      // per action: |S| x d
    std::vector<Eigen::VectorXd> row_weight;  // per action: |S|
    Eigen::MatrixXd basis;                    // V, |S| x d
    const std::vector<int>* cluster_of = nullptr;
};

inline VeStats build_ve_stats(const FactorizedModel& model, const TransitionDataset& dataset,
                              const FunctionSet& vset, bool weight_by_counts) {
    if (vset.dim() < 1) throw std::invalid_argument("function set is empty");
    if (vset.n_states() != model.n_states())
        throw std::invalid_argument("function set state count mismatch");
    VeStats st;
    st.basis = vset.basis;
    if (vset.kind == FunctionSetKind::aggregation_basis && !vset.cluster_of.empty())
        st.cluster_of = &vset.cluster_of;
    const double gamma = model.gamma();
    for (int a = 0; a < model.n_actions(); ++a) {
        Eigen::MatrixXd c = gamma * (dataset.p_hat(a) * vset.basis);
        c.colwise() += dataset.reward_mean().col(a) - model.reward_table.col(a);
        Eigen::VectorXd w = Eigen::VectorXd::Zero(model.n_states());
        for (int s : dataset.visited_states(a))
            w[s] = weight_by_counts ? dataset.visit_counts()(s, a) : 1.0;
        st.target.push_back(std::move(c));
        st.row_weight.push_back(std::move(w));
    }
    return st;
}

// Scratch space reused across training steps.
struct VeWorkspace {
    Eigen::MatrixXd w;   // k x d
    Eigen::MatrixXd e;   // |S| x d
    Eigen::MatrixXd ew;  // |S| x d
    Eigen::MatrixXd gd;  // |S| x k
    Eigen::MatrixXd gw;  // k x d
    Eigen::MatrixXd gk;  // k x |S|
};

inline double ve_loss_and_grad_impl(const FactorizedModel& model, const VeStats& st,
                                    ModelGrads* grads, VeWorkspace& ws) {
    const double gamma = model.gamma();
    double loss = 0.0;
    for (int a = 0; a < model.n_actions(); ++a) {
        const auto ai = static_cast<std::size_t>(a);
        const Eigen::MatrixXd& d = model.d_factor(a);
        const Eigen::MatrixXd& k = model.k_factor(a);
        const Eigen::MatrixXd& v = st.basis;
        const int dim = static_cast<int>(v.cols());
        const int ns = static_cast<int>(v.rows());

        if (st.cluster_of) {
            ws.w.setZero(k.rows(), dim);
            for (int s2 = 0; s2 < ns; ++s2) ws.w.col((*st.cluster_of)[static_cast<std::size_t>(s2)]) += k.col(s2);
        } else {
            ws.w.noalias() = k * v;
        }
        ws.e.noalias() = d * ws.w;
        ws.e = gamma * ws.e - st.target[ai];
        ws.ew.noalias() = st.row_weight[ai].asDiagonal() * ws.e;
        loss += (ws.ew.array() * ws.e.array()).sum();
        if (!grads) continue;

        ws.gd.noalias() = (2.0 * gamma) * (ws.ew * ws.w.transpose());
        ws.gw.noalias() = (2.0 * gamma) * (d.transpose() * ws.ew);
        if (st.cluster_of) {
            ws.gk.resize(k.rows(), ns);
            for (int s2 = 0; s2 < ns; ++s2) ws.gk.col(s2) = ws.gw.col((*st.cluster_of)[static_cast<std::size_t>(s2)]);
        } else {
            ws.gk.noalias() = ws.gw * v.transpose();
        }
        row_softmax_backprop(d, ws.gd, grads->f_d[ai]);
        row_softmax_backprop(k, ws.gk, grads->f_k[ai]);
    }
    return loss;
}

}  // namespace detail

// Value-equivalence loss over the per-action policy family and the given
// function set, p = 2, one term per visited (s, a) cell and column v:
//   loss = sum_{(s,a) visited} w(s,a) sum_v ( [Rbar(s,a) + gamma Pbar_s^a v]
//                                           - [Rmodel(s,a) + gamma P_s^a v] )^2
// with w = 1, or w = N(s,a) when weight_by_counts is set. The reward table
// is treated as constant, so gradients flow only through the transitions.
inline double ve_loss_and_grad(const FactorizedModel& model, const TransitionDataset& dataset,
                               const FunctionSet& vset, ModelGrads* grads = nullptr,
                               bool weight_by_counts = false) {
    detail::VeStats st = detail::build_ve_stats(model, dataset, vset, weight_by_counts);
    detail::VeWorkspace ws;
    return detail::ve_loss_and_grad_impl(model, st, grads, ws);
}

// Max-norm mismatch of the two Bellman images of one function v over the
// visited (s, a) cells (the per-column residual of the loss above).
inline double ve_residual_inf(const FactorizedModel& model, const TransitionDataset& dataset,
                              const Eigen::VectorXd& v) {
    double worst = 0.0;
    const double gamma = model.gamma();
    for (int a = 0; a < model.n_actions(); ++a) {
        const Eigen::VectorXd data_side = dataset.reward_mean().col(a) + gamma * (dataset.p_hat(a) * v);
        const Eigen::VectorXd model_side = model.reward_table.col(a) + gamma * (model.transition(a) * v);
        for (int s : dataset.visited_states(a))
            worst = std::max(worst, std::abs(data_side[s] - model_side[s]));
    }
    return worst;
}

// Adam with per-tensor moment accumulators over the logits, ordered
// [F_D^0..F_D^{A-1}, F_K^0..F_K^{A-1}].
struct AdamState {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Eigen::MatrixXd> m;
    std::vector<Eigen::MatrixXd> v;

    explicit AdamState(double lr_ = 5e-5) : lr(lr_) {}

    void init_like(const FactorizedModel& model) {
        m.clear();
        v.clear();
        for (const auto& t : model.f_d) {
            m.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
            v.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
        }
        for (const auto& t : model.f_k) {
            m.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
            v.emplace_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
        }
        step = 0;
    }

    void begin_step() { ++step; }

    void update(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, std::size_t index) {
        Eigen::MatrixXd& mm = m.at(index);
        Eigen::MatrixXd& vv = v.at(index);
        mm = beta1 * mm + (1.0 - beta1) * grad;
        vv = beta2 * vv + (1.0 - beta2) * grad.array().square().matrix();
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        param.array() -=
            lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
    }
};

struct TrainObjective {
    enum class Kind { mle, ve };
    Kind kind = Kind::mle;
    const FunctionSet* vset = nullptr;  // required for ve
    bool weight_by_counts = false;

    static TrainObjective mle() { return {}; }
    static TrainObjective ve(const FunctionSet& vset, bool weight_by_counts = false) {
        TrainObjective o;
        o.kind = Kind::ve;
        o.vset = &vset;
        o.weight_by_counts = weight_by_counts;
        return o;
    }
};

struct TrainReport {
    double final_loss = 0.0;
    double grad_inf_norm = 0.0;
    int steps = 0;
    std::vector<double> loss_trajectory;
    double wall_time_sec = 0.0;
};

// Full-batch Adam on the sufficient statistics. Stops after max_steps
// optimizer steps or as soon as the gradient max-norm falls below
// grad_tol. The model is trained in place; row-stochasticity of the
// factors is re-validated every 1000 steps.
inline TrainReport train(FactorizedModel& model, const TransitionDataset& dataset,
                         const TrainObjective& objective, AdamState& adam, int max_steps = 50000,
                         double grad_tol = 1e-7) {
    if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    if (adam.m.empty()) adam.init_like(model);

    detail::VeStats ve_stats;
    detail::VeWorkspace ws;
    if (objective.kind == TrainObjective::Kind::ve) {
        if (!objective.vset) throw std::invalid_argument("ve objective requires a function set");
        ve_stats = detail::build_ve_stats(model, dataset, *objective.vset,
                                          objective.weight_by_counts);
    }

    ModelGrads grads;
    grads.init_like(model);

    TrainReport report;
    const int sample_every = std::max(1, max_steps / 1000);
    const std::size_t n_actions = model.f_d.size();

    auto compute = [&](bool with_grads) {
        return objective.kind == TrainObjective::Kind::mle
                   ? mle_loss_and_grad(model, dataset, with_grads ? &grads : nullptr)
                   : detail::ve_loss_and_grad_impl(model, ve_stats, with_grads ? &grads : nullptr,
                                                   ws);
    };

    double loss = 0.0;
    for (int step = 1; step <= max_steps; ++step) {
        loss = compute(true);
        if (!std::isfinite(loss))
            throw std::runtime_error("non-finite training loss at step " + std::to_string(step));
        const double gnorm = grads.inf_norm();
        if (step == 1 || step % sample_every == 0) report.loss_trajectory.push_back(loss);
        report.steps = step;
        report.grad_inf_norm = gnorm;
        if (gnorm < grad_tol) break;

        adam.begin_step();
        for (std::size_t i = 0; i < n_actions; ++i) adam.update(model.f_d[i], grads.f_d[i], i);
        for (std::size_t i = 0; i < n_actions; ++i)
            adam.update(model.f_k[i], grads.f_k[i], n_actions + i);
        model.refresh();

        if (step % 1000 == 0) {
            for (std::size_t a = 0; a < n_actions; ++a) {
                const auto check = [](const Eigen::MatrixXd& rows) {
                    for (Eigen::Index r = 0; r < rows.rows(); ++r)
                        if (std::abs(rows.row(r).sum() - 1.0) > 1e-10)
                            throw std::runtime_error("factor row drifted off the simplex");
                };
                check(model.d_factor(static_cast<int>(a)));
                check(model.k_factor(static_cast<int>(a)));
            }
        }
    }

    report.final_loss = compute(false);
    if (report.loss_trajectory.empty() || report.loss_trajectory.back() != report.final_loss)
        report.loss_trajectory.push_back(report.final_loss);
    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with manifest.txt plus one exact-decimal CSV per
// tensor. Loading reproduces the model bit for bit.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    int n_states = 0;
    int n_actions = 0;
    int rank = 0;
    double gamma = 0.0;
    std::uint64_t seed = 0;
    std::string objective;  // "mle" or "ve"
};

inline void save_checkpoint(const std::string& dir, const FactorizedModel& model,
                            const CheckpointMeta& meta) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream mf = open_out(dir + "/manifest.txt");
    mf << "n_states=" << model.n_states() << '\n';
    mf << "n_actions=" << model.n_actions() << '\n';
    mf << "rank=" << model.rank() << '\n';
    mf << "gamma=" << format_exact(model.gamma()) << '\n';
    mf << "seed=" << meta.seed << '\n';
    mf << "objective=" << meta.objective << '\n';
    for (int a = 0; a < model.n_actions(); ++a) {
        write_matrix_csv(dir + "/F_D_a" + std::to_string(a) + ".csv",
                         model.f_d[static_cast<std::size_t>(a)]);
        write_matrix_csv(dir + "/F_K_a" + std::to_string(a) + ".csv",
                         model.f_k[static_cast<std::size_t>(a)]);
    }
    write_matrix_csv(dir + "/reward.csv", model.reward_table);
}

inline std::pair<FactorizedModel, CheckpointMeta> load_checkpoint(const std::string& dir) {
    std::ifstream mf = open_in(dir + "/manifest.txt");
    CheckpointMeta meta;
    std::string line;
    while (std::getline(mf, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "n_states") meta.n_states = static_cast<int>(parse_long(value));
        else if (key == "n_actions") meta.n_actions = static_cast<int>(parse_long(value));
        else if (key == "rank") meta.rank = static_cast<int>(parse_long(value));
        else if (key == "gamma") meta.gamma = parse_double(value);
        else if (key == "seed") meta.seed = std::stoull(value);
        else if (key == "objective") meta.objective = value;
    }
    FactorizedModel model(meta.n_states, meta.n_actions, meta.rank, meta.gamma);
    for (int a = 0; a < meta.n_actions; ++a) {
        model.f_d[static_cast<std::size_t>(a)] =
            read_matrix_csv(dir + "/F_D_a" + std::to_string(a) + ".csv");
        model.f_k[static_cast<std::size_t>(a)] =
            read_matrix_csv(dir + "/F_K_a" + std::to_string(a) + ".csv");
    }
    model.reward_table = read_matrix_csv(dir + "/reward.csv");
    model.refresh();
    return {std::move(model), meta};
}

}  // namespace veq
