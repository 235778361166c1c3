#pragma once

// Test-side reference implementations. Everything here is deliberately
// independent of the library's numerics: plain scalar loops instead of the
// library's linear solves and factorized expressions, and std:: random
// machinery instead of the library's generator, so agreement between the
// two is evidence rather than tautology.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "veq/env.hpp"
#include "veq/mdp.hpp"
#include "veq/model.hpp"

namespace oracle {

// Policy value by plain fixed-point iteration v <- r_pi + gamma P_pi v,
// with r_pi and P_pi accumulated by scalar loops.
inline Eigen::VectorXd power_iteration_value(const veq::ModelView& m,
                                             const veq::TabularPolicy& pi, double tol = 1e-13,
                                             int max_iters = 2000000) {
    const int n = m.n_states();
    const int na = m.n_actions();
    Eigen::MatrixXd p_pi = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd r_pi = Eigen::VectorXd::Zero(n);
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < na; ++a) {
            const double w = pi.probs(s, a);
            r_pi[s] += w * m.reward()(s, a);
            for (int s2 = 0; s2 < n; ++s2) p_pi(s, s2) += w * m.transition(a)(s, s2);
        }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    for (int it = 0; it < max_iters; ++it) {
        Eigen::VectorXd next = r_pi + m.gamma() * (p_pi * v);
        const double delta = (next - v).lpNorm<Eigen::Infinity>();
        v = next;
        if (delta < tol) return v;
    }
    throw std::runtime_error("oracle power iteration did not converge");
}

// Monte-Carlo mean policy value over all start states (cycled start states,
// std::mt19937 + std::discrete_distribution — none of the library's RNG).
inline double mc_mean_value(const veq::TabularMdp& mdp, const Eigen::VectorXd& entry_reward,
                            const veq::TabularPolicy& pi, int episodes, int horizon,
                            unsigned seed) {
    const int n = mdp.n_states();
    const int na = mdp.n_actions();
    std::mt19937_64 eng(seed);
    std::vector<std::discrete_distribution<int>> act(static_cast<std::size_t>(n));
    std::vector<std::vector<std::discrete_distribution<int>>> next(
        static_cast<std::size_t>(na),
        std::vector<std::discrete_distribution<int>>(static_cast<std::size_t>(n)));
    for (int s = 0; s < n; ++s) {
        const Eigen::VectorXd row = pi.probs.row(s);
        act[static_cast<std::size_t>(s)] =
            std::discrete_distribution<int>(row.data(), row.data() + na);
        for (int a = 0; a < na; ++a) {
            const Eigen::VectorXd trow = mdp.transition(a).row(s);
            next[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)] =
                std::discrete_distribution<int>(trow.data(), trow.data() + n);
        }
    }
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        int s = e % n;
        double ret = 0.0, disc = 1.0;
        for (int t = 0; t < horizon; ++t) {
            const int a = act[static_cast<std::size_t>(s)](eng);
            const int s2 = next[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)](eng);
            ret += disc * entry_reward[s2];
            disc *= mdp.gamma();
            s = s2;
        }
        total += ret;
    }
    return total / episodes;
}

// Random MDP with Dirichlet(1) transition rows and uniform rewards.
inline veq::TabularMdp random_mdp(int n_states, int n_actions, double gamma,
                                  std::mt19937_64& eng) {
    std::gamma_distribution<double> g(1.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Eigen::MatrixXd> transition(static_cast<std::size_t>(n_actions));
    for (int a = 0; a < n_actions; ++a) {
        Eigen::MatrixXd p(n_states, n_states);
        for (int s = 0; s < n_states; ++s) {
            double sum = 0.0;
            for (int s2 = 0; s2 < n_states; ++s2) {
                p(s, s2) = g(eng) + 1e-12;
                sum += p(s, s2);
            }
            p.row(s) /= sum;
            p.row(s) /= p.row(s).sum();  // second normalization pins the row sum to 1.0
        }
        transition[static_cast<std::size_t>(a)] = p;
    }
    Eigen::MatrixXd reward(n_states, n_actions);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) reward(s, a) = u(eng);
    return veq::TabularMdp(std::move(reward), std::move(transition), gamma);
}

// Negative log-likelihood accumulated over the dense count matrices.
inline double dense_mle_loss(const veq::FactorizedModel& model,
                             const veq::TransitionDataset& data) {
    double loss = 0.0;
    for (int a = 0; a < model.n_actions(); ++a) {
        const Eigen::MatrixXd& p = model.transition(a);
        for (int s = 0; s < model.n_states(); ++s)
            for (int s2 = 0; s2 < model.n_states(); ++s2) {
                const double c = data.counts(a)(s, s2);
                if (c > 0.0) loss -= c * std::log(p(s, s2));
            }
    }
    return loss;
}

// Squared Bellman mismatch summed over visited cells and basis columns,
// written as four nested scalar loops.
inline double dense_ve_loss(const veq::FactorizedModel& model, const veq::TransitionDataset& data,
                            const Eigen::MatrixXd& basis, bool weight_by_counts) {
    const double gamma = model.gamma();
    double loss = 0.0;
    for (int a = 0; a < model.n_actions(); ++a) {
        const Eigen::MatrixXd& p = model.transition(a);
        for (int s = 0; s < model.n_states(); ++s) {
            const double visits = data.visit_counts()(s, a);
            if (visits == 0.0) continue;
            const double w = weight_by_counts ? visits : 1.0;
            for (int j = 0; j < basis.cols(); ++j) {
                double lhs = data.reward_mean()(s, a);
                double rhs = model.reward_table(s, a);
                for (int s2 = 0; s2 < model.n_states(); ++s2) {
                    lhs += gamma * data.p_hat(a)(s, s2) * basis(s2, j);
                    rhs += gamma * p(s, s2) * basis(s2, j);
                }
                loss += w * (lhs - rhs) * (lhs - rhs);
            }
        }
    }
    return loss;
}

// Central finite differences of an arbitrary scalar function of the model
// logits; f must not mutate the model it receives.
template <class F>
inline veq::ModelGrads fd_model_gradient(const veq::FactorizedModel& model, F f,
                                         double h = 1e-6) {
    veq::ModelGrads grads;
    grads.init_like(model);
    veq::FactorizedModel work = model;
    auto probe = [&](Eigen::MatrixXd& tensor, Eigen::Index i) {
        const double saved = tensor(i);
        tensor(i) = saved + h;
        work.refresh();
        const double up = f(work);
        tensor(i) = saved - h;
        work.refresh();
        const double down = f(work);
        tensor(i) = saved;
        work.refresh();
        return (up - down) / (2.0 * h);
    };
    for (std::size_t a = 0; a < work.f_d.size(); ++a)
        for (Eigen::Index i = 0; i < work.f_d[a].size(); ++i)
            grads.f_d[a](i) = probe(work.f_d[a], i);
    for (std::size_t a = 0; a < work.f_k.size(); ++a)
        for (Eigen::Index i = 0; i < work.f_k[a].size(); ++i)
            grads.f_k[a](i) = probe(work.f_k[a], i);
    return grads;
}

inline double max_grad_gap(const veq::ModelGrads& a, const veq::ModelGrads& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.f_d.size(); ++i)
        worst = std::max(worst, (a.f_d[i] - b.f_d[i]).lpNorm<Eigen::Infinity>());
    for (std::size_t i = 0; i < a.f_k.size(); ++i)
        worst = std::max(worst, (a.f_k[i] - b.f_k[i]).lpNorm<Eigen::Infinity>());
    return worst;
}

inline double population_sd(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace oracle
