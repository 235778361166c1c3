#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "veq/rng.hpp"

namespace veq {

using ValueFunction = Eigen::VectorXd;

// Stochastic policy: probs(s, a) = probability of action a in state s.
struct TabularPolicy {
    Eigen::MatrixXd probs;

    int n_states() const { return static_cast<int>(probs.rows()); }
    int n_actions() const { return static_cast<int>(probs.cols()); }

    // One-hot policy from a per-state action vector.
    static TabularPolicy deterministic(const std::vector<int>& actions, int n_actions) {
        TabularPolicy p;
        p.probs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(actions.size()), n_actions);
        for (std::size_t s = 0; s < actions.size(); ++s) {
            if (actions[s] < 0 || actions[s] >= n_actions)
                throw std::invalid_argument("action index out of range");
            p.probs(static_cast<Eigen::Index>(s), actions[s]) = 1.0;
        }
        return p;
    }

    // Every state picks uniformly among all actions.
    static TabularPolicy uniform(int n_states, int n_actions) {
        TabularPolicy p;
        p.probs = Eigen::MatrixXd::Constant(n_states, n_actions, 1.0 / n_actions);
        return p;
    }

    void validate() const {
        for (Eigen::Index s = 0; s < probs.rows(); ++s) {
            if ((probs.row(s).array() < 0.0).any())
                throw std::invalid_argument("negative action probability");
            if (std::abs(probs.row(s).sum() - 1.0) > 1e-12)
                throw std::invalid_argument("policy row does not sum to 1");
        }
    }
};

// Read-only view of a decision process: rewards, per-action transition
// matrices, and the discount. Planning and evaluation are written against
// this interface so the exact environment and any learned model are
// interchangeable.
class ModelView {
  public:
    virtual ~ModelView() = default;
    virtual int n_states() const = 0;
    virtual int n_actions() const = 0;
    virtual double gamma() const = 0;
    // reward()(s, a) = expected immediate reward.
    virtual const Eigen::MatrixXd& reward() const = 0;
    // transition(a)(s, s') = probability of s -> s' under action a.
    virtual const Eigen::MatrixXd& transition(int a) const = 0;
};

// Exact finite MDP. Immutable after construction; rows are validated
// stochastic and gamma < 1 so policy evaluation is always well posed.
class TabularMdp final : public ModelView {
  public:
    TabularMdp(Eigen::MatrixXd reward, std::vector<Eigen::MatrixXd> transition, double gamma)
        : reward_(std::move(reward)), transition_(std::move(transition)), gamma_(gamma) {
        n_states_ = static_cast<int>(reward_.rows());
        n_actions_ = static_cast<int>(reward_.cols());
        if (n_states_ <= 0 || n_actions_ <= 0)
            throw std::invalid_argument("empty state or action space");
        if (!(gamma_ >= 0.0 && gamma_ < 1.0))
            throw std::invalid_argument("gamma must lie in [0, 1)");
        if (!reward_.allFinite()) throw std::invalid_argument("non-finite reward");
        if (static_cast<int>(transition_.size()) != n_actions_)
            throw std::invalid_argument("one transition matrix per action required");
        for (const Eigen::MatrixXd& p : transition_) {
            if (p.rows() != n_states_ || p.cols() != n_states_)
                throw std::invalid_argument("transition matrix shape mismatch");
            if ((p.array() < 0.0).any()) throw std::invalid_argument("negative probability");
            for (Eigen::Index s = 0; s < p.rows(); ++s)
                if (std::abs(p.row(s).sum() - 1.0) > 1e-12)
                    throw std::invalid_argument("transition row does not sum to 1");
        }
    }

    int n_states() const override { return n_states_; }
    int n_actions() const override { return n_actions_; }
    double gamma() const override { return gamma_; }
    const Eigen::MatrixXd& reward() const override { return reward_; }
    const Eigen::MatrixXd& transition(int a) const override {
        return transition_.at(static_cast<std::size_t>(a));
    }

  private:
    Eigen::MatrixXd reward_;
    std::vector<Eigen::MatrixXd> transition_;
    double gamma_;
    int n_states_;
    int n_actions_;
};

namespace detail {

inline void require_dims(const ModelView& m, const TabularPolicy& policy) {
    if (policy.probs.rows() != m.n_states() || policy.probs.cols() != m.n_actions())
        throw std::invalid_argument("policy shape does not match model");
}

}  // namespace detail

// Policy-averaged reward vector r_pi(s) = sum_a pi(a|s) r(s, a).
inline Eigen::VectorXd policy_reward(const ModelView& m, const TabularPolicy& policy) {
    detail::require_dims(m, policy);
    return (m.reward().array() * policy.probs.array()).rowwise().sum();
}

// Policy-averaged transition matrix P_pi(s, s') = sum_a pi(a|s) p(s'|s, a).
inline Eigen::MatrixXd policy_transition(const ModelView& m, const TabularPolicy& policy) {
    detail::require_dims(m, policy);
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(m.n_states(), m.n_states());
    for (int a = 0; a < m.n_actions(); ++a)
        p += policy.probs.col(a).asDiagonal() * m.transition(a);
    return p;
}

// One application of the policy's Bellman operator:
// (T_pi v)(s) = sum_a pi(a|s) [ r(s,a) + gamma * sum_s' p(s'|s,a) v(s') ].
inline ValueFunction bellman_apply(const ModelView& m, const TabularPolicy& policy,
                                   const ValueFunction& v) {
    detail::require_dims(m, policy);
    if (v.size() != m.n_states()) throw std::invalid_argument("value vector length mismatch");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(m.n_states());
    for (int a = 0; a < m.n_actions(); ++a)
        out.array() += policy.probs.col(a).array() *
                       (m.reward().col(a) + m.gamma() * (m.transition(a) * v)).array();
    return out;
}

// Exact policy value: solves (I - gamma * P_pi) v = r_pi directly.
// The result satisfies the Bellman fixed point to < 1e-9 in the max norm.
inline ValueFunction evaluate_exact(const ModelView& m, const TabularPolicy& policy) {
    const Eigen::MatrixXd p_pi = policy_transition(m, policy);
    const Eigen::VectorXd r_pi = policy_reward(m, policy);
    const Eigen::MatrixXd a =
        Eigen::MatrixXd::Identity(m.n_states(), m.n_states()) - m.gamma() * p_pi;
    const Eigen::VectorXd v = a.partialPivLu().solve(r_pi);
    const double residual = (v - (r_pi + m.gamma() * (p_pi * v))).lpNorm<Eigen::Infinity>();
    if (!(residual < 1e-9))
        throw std::runtime_error("policy evaluation residual " + std::to_string(residual));
    return v;
}

// Greedy policy w.r.t. a value vector; ties go to the lowest action index.
inline TabularPolicy greedy_policy(const ModelView& m, const ValueFunction& v) {
    std::vector<int> actions(static_cast<std::size_t>(m.n_states()), 0);
    Eigen::MatrixXd q(m.n_states(), m.n_actions());
    for (int a = 0; a < m.n_actions(); ++a)
        q.col(a) = m.reward().col(a) + m.gamma() * (m.transition(a) * v);
    for (int s = 0; s < m.n_states(); ++s) {
        int best = 0;
        for (int a = 1; a < m.n_actions(); ++a)
            if (q(s, a) > q(s, best)) best = a;
        actions[static_cast<std::size_t>(s)] = best;
    }
    return TabularPolicy::deterministic(actions, m.n_actions());
}

struct ValueIterationResult {
    ValueFunction values;
    TabularPolicy policy;
    double residual = 0.0;
    int iterations = 0;
};

// Optimal-value iteration v <- max_a [ r(s,a) + gamma * P^a v ] until the
// max-norm residual drops below tol; returns the greedy policy of the fixed
// point (ties to the lowest action index).
inline ValueIterationResult value_iteration(const ModelView& m, double tol = 1e-8,
                                            int max_iters = 100000) {
    if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
    Eigen::VectorXd v = Eigen::VectorXd::Zero(m.n_states());
    Eigen::VectorXd next(m.n_states());
    double residual = 0.0;
    for (int it = 1; it <= max_iters; ++it) {
        next = (m.reward().col(0) + m.gamma() * (m.transition(0) * v));
        for (int a = 1; a < m.n_actions(); ++a)
            next = next.cwiseMax(m.reward().col(a) + m.gamma() * (m.transition(a) * v));
        residual = (next - v).lpNorm<Eigen::Infinity>();
        v.swap(next);
        if (residual < tol)
            return ValueIterationResult{v, greedy_policy(m, v), residual, it};
    }
    throw std::runtime_error("value iteration did not converge; last residual " +
                             std::to_string(residual));
}

// n deterministic policies, each state's action uniform and independent.
inline std::vector<TabularPolicy> sample_deterministic_policies(int n, int n_states,
                                                                int n_actions,
                                                                std::uint64_t rng_seed) {
    if (n < 1) throw std::invalid_argument("need at least one policy");
    Rng rng(rng_seed);
    std::vector<TabularPolicy> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<int> actions(static_cast<std::size_t>(n_states));
        for (int s = 0; s < n_states; ++s) actions[static_cast<std::size_t>(s)] = rng.uniform_int(n_actions);
        out.push_back(TabularPolicy::deterministic(actions, n_actions));
    }
    return out;
}

// The per-action policy family { pi^a }: policy a plays action a everywhere.
// Every stochastic policy row is a pointwise convex combination of these.
inline std::vector<TabularPolicy> action_policies(int n_states, int n_actions) {
    if (n_actions < 1) throw std::invalid_argument("need at least one action");
    std::vector<TabularPolicy> out;
    out.reserve(static_cast<std::size_t>(n_actions));
    for (int a = 0; a < n_actions; ++a)
        out.push_back(TabularPolicy::deterministic(
            std::vector<int>(static_cast<std::size_t>(n_states), a), n_actions));
    return out;
}

}  // namespace veq
