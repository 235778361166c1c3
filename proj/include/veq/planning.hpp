#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "veq/csv.hpp"
#include "veq/function_sets.hpp"
#include "veq/mdp.hpp"
#include "veq/rng.hpp"

namespace veq {

struct LstdConfig {
    int samples_per_policy = 10000;
    int n_iterations = 40;
    double ridge = 1e-6;
    std::uint64_t rng_seed = 0;
    // Replace the sampled model next-state with the expected feature vector
    // sum_s' P(s'|s,a) phi(s'); exact for linear values, lower variance.
    bool expected_next_state = false;

    void validate() const {
        if (samples_per_policy < 1 || n_iterations < 1 || !(ridge > 0.0))
            throw std::invalid_argument("lstd config fields must be positive");
    }
};

// One sweep cell: the identifying coordinates plus the measured outcome.
struct ExperimentResult {
    std::string env;
    std::string method;    // "mle" or "ve"
    std::string strategy;  // "basis", "value_polytope", or "none"
    int rank = 0;
    int dim_v = 0;
    std::uint64_t seed = 0;
    double mean_value = 0.0;
    double final_loss = 0.0;
    int steps = 0;
};

inline std::string experiment_csv_header() {
    return "env,method,strategy,rank,dim_v,seed,mean_value,final_loss,steps";
}

inline std::string to_csv_row(const ExperimentResult& r) {
    std::string row;
    row += r.env + ',' + r.method + ',' + r.strategy + ',';
    row += std::to_string(r.rank) + ',' + std::to_string(r.dim_v) + ',';
    row += std::to_string(r.seed) + ',';
    row += format_sig10(r.mean_value) + ',' + format_sig10(r.final_loss) + ',';
    row += std::to_string(r.steps);
    return row;
}

// Greedy policy from value iteration run on the model's own view.
inline TabularPolicy plan_value_iteration(const ModelView& model, double tol = 1e-8,
                                          int max_iters = 100000) {
    return value_iteration(model, tol, max_iters).policy;
}

// Mean exact value over states: (1/|S|) sum_s v_pi(s) on the true MDP.
inline double evaluate_policy_mean(const ModelView& true_mdp, const TabularPolicy& policy) {
    return evaluate_exact(true_mdp, policy).mean();
}

namespace detail {

struct LstdSystem {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;
};

// Walks the true environment under `policy`, swaps reward and next state
// for the model's own predictions, and accumulates the least-squares
// temporal-difference system. One-hot aggregation features get a sparse
// scalar update; arbitrary feature matrices fall back to rank-1 updates.
inline LstdSystem accumulate_lstd(const ModelView& model, const TabularPolicy& policy,
                                  const FunctionSet& vset, const LstdConfig& cfg,
                                  const ModelView& true_mdp, Rng& rng,
                                  const std::vector<Eigen::MatrixXd>& true_cdfs_t,
                                  const std::vector<Eigen::MatrixXd>& model_cdfs_t,
                                  const std::vector<Eigen::MatrixXd>& model_agg) {
    const int d = vset.dim();
    const int n = true_mdp.n_states();
    const double gamma = model.gamma();
    const bool one_hot = vset.kind == FunctionSetKind::aggregation_basis;
    const std::vector<int>& cluster = vset.cluster_of;

    LstdSystem sys{Eigen::MatrixXd::Zero(d, d), Eigen::VectorXd::Zero(d)};
    Eigen::RowVectorXd target(d);
    int s = rng.uniform_int(n);
    for (int i = 0; i < cfg.samples_per_policy; ++i) {
        const int a = rng.categorical(policy.probs.row(s));
        int s_model = -1;
        if (!cfg.expected_next_state)
            s_model =
                rng.categorical_cdf(model_cdfs_t[static_cast<std::size_t>(a)].col(s).data(), n);
        if (one_hot) {
            const int cs = cluster[static_cast<std::size_t>(s)];
            sys.a(cs, cs) += 1.0;
            if (cfg.expected_next_state)
                sys.a.row(cs) -= gamma * model_agg[static_cast<std::size_t>(a)].row(s);
            else
                sys.a(cs, cluster[static_cast<std::size_t>(s_model)]) -= gamma;
            sys.b[cs] += model.reward()(s, a);
        } else {
            target = vset.basis.row(s);
            if (cfg.expected_next_state)
                target -= gamma * model_agg[static_cast<std::size_t>(a)].row(s);
            else
                target -= gamma * vset.basis.row(s_model);
            sys.a.noalias() += vset.basis.row(s).transpose() * target;
            sys.b += model.reward()(s, a) * vset.basis.row(s).transpose();
        }
        s = rng.categorical_cdf(true_cdfs_t[static_cast<std::size_t>(a)].col(s).data(), n);
    }
    return sys;
}

}  // namespace detail

// One least-squares temporal-difference evaluation of `policy`: solves
// (sum phi(s)(phi(s) - gamma phi(s'))^T + ridge I) w = sum phi(s) r with
// experience states drawn on-policy from the true environment and
// (r, s') replaced by the model's predictions.
inline Eigen::VectorXd lstd_evaluate(const ModelView& model, const TabularPolicy& policy,
                                     const FunctionSet& vset, const LstdConfig& cfg,
                                     const ModelView& true_mdp) {
    cfg.validate();
    vset.validate();

    Rng rng(cfg.rng_seed);
    std::vector<Eigen::MatrixXd> true_cdfs_t, model_cdfs_t, model_agg;
    for (int a = 0; a < true_mdp.n_actions(); ++a) {
        true_cdfs_t.push_back(row_cdfs(true_mdp.transition(a)).transpose());
        if (cfg.expected_next_state)
            model_agg.push_back(model.transition(a) * vset.basis);
        else
            model_cdfs_t.push_back(row_cdfs(model.transition(a)).transpose());
    }

    detail::LstdSystem sys = detail::accumulate_lstd(model, policy, vset, cfg, true_mdp, rng,
                                                     true_cdfs_t, model_cdfs_t, model_agg);
    sys.a += cfg.ridge * Eigen::MatrixXd::Identity(vset.dim(), vset.dim());
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(sys.a);
    const Eigen::VectorXd w = lu.solve(sys.b);
    if (!w.allFinite()) throw std::runtime_error("singular lstd system");
    return w;
}

// Approximate policy iteration: evaluate with lstd_evaluate, improve
// greedily with pi'(s) = argmax_a [ r(s,a) + gamma sum_s' p(s'|s,a) w(c(s')) ]
// (ties to the lowest action index), starting from the uniform-random
// policy and repeating n_iterations times.
inline TabularPolicy policy_iteration_lstd(const ModelView& model, const FunctionSet& vset,
                                           const LstdConfig& cfg, const ModelView& true_mdp) {
    cfg.validate();
    const int n = model.n_states();
    const int n_actions = model.n_actions();

    TabularPolicy policy = TabularPolicy::uniform(n, n_actions);
    for (int it = 0; it < cfg.n_iterations; ++it) {
        LstdConfig round = cfg;
        round.rng_seed = derive_seed(cfg.rng_seed, static_cast<std::uint64_t>(it));
        const Eigen::VectorXd w = lstd_evaluate(model, policy, vset, round, true_mdp);
        const Eigen::VectorXd values = vset.basis * w;
        policy = greedy_policy(model, values);
    }
    return policy;
}

// Mean discounted return of `policy` over sampled episodes; the cross-check
// counterpart of evaluate_policy_mean for audits.
inline double evaluate_policy_rollout(const TabularMdp& mdp, const Eigen::VectorXd& entry_reward,
                                      const TabularPolicy& policy, int episodes, int horizon,
                                      std::uint64_t rng_seed) {
    Rng rng(rng_seed);
    std::vector<Eigen::MatrixXd> cdfs_t;
    for (int a = 0; a < mdp.n_actions(); ++a)
        cdfs_t.push_back(row_cdfs(mdp.transition(a)).transpose());
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        int s = rng.uniform_int(mdp.n_states());
        double ret = 0.0;
        double disc = 1.0;
        for (int t = 0; t < horizon; ++t) {
            const int a = rng.categorical(policy.probs.row(s));
            const int s2 = rng.categorical_cdf(cdfs_t[static_cast<std::size_t>(a)].col(s).data(),
                                               mdp.n_states());
            ret += disc * entry_reward[s2];
            disc *= mdp.gamma();
            s = s2;
        }
        total += ret;
    }
    return total / episodes;
}

}  // namespace veq
