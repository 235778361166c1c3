#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "veq/csv.hpp"
#include "veq/mdp.hpp"
#include "veq/rng.hpp"

namespace veq {

enum class FunctionSetKind { aggregation_basis, value_polytope };

// A set of value functions over states, stored as the |S| x d matrix whose
// column j is function v_j. Aggregation bases are 0/1 indicators of a state
// partition (cluster_of(s) = the one column with a 1 in row s); polytope
// sets stack exact values of sampled deterministic policies.
struct FunctionSet {
    Eigen::MatrixXd basis;
    FunctionSetKind kind = FunctionSetKind::value_polytope;
    std::vector<int> cluster_of;             // aggregation metadata
    std::vector<std::vector<int>> policies;  // polytope metadata: action per state

    int n_states() const { return static_cast<int>(basis.rows()); }
    int dim() const { return static_cast<int>(basis.cols()); }

    // Identity partition: every state is its own cluster.
    static FunctionSet identity(int n_states) {
        FunctionSet f;
        f.basis = Eigen::MatrixXd::Identity(n_states, n_states);
        f.kind = FunctionSetKind::aggregation_basis;
        f.cluster_of.resize(static_cast<std::size_t>(n_states));
        for (int s = 0; s < n_states; ++s) f.cluster_of[static_cast<std::size_t>(s)] = s;
        return f;
    }

    void validate() const {
        if (dim() < 1) throw std::invalid_argument("function set is empty");
        if (kind == FunctionSetKind::aggregation_basis) {
            if (static_cast<int>(cluster_of.size()) != n_states())
                throw std::invalid_argument("cluster assignment length mismatch");
            for (int s = 0; s < n_states(); ++s) {
                if (basis.row(s).sum() != 1.0 || basis.row(s).maxCoeff() != 1.0)
                    throw std::invalid_argument("aggregation row is not a one-hot indicator");
                if (basis(s, cluster_of[static_cast<std::size_t>(s)]) != 1.0)
                    throw std::invalid_argument("cluster assignment disagrees with basis");
            }
        }
    }
};

namespace detail {

// Lloyd iterations with deterministic tie-breaking: assignment ties go to
// the lowest center index; an emptied cluster keeps its previous center.
// Returns the assignment; centers is overwritten.
inline std::vector<int> lloyd_kmeans(const Eigen::MatrixXd& points, Eigen::MatrixXd& centers,
                                     int max_iters) {
    const int n = static_cast<int>(points.rows());
    const int d = static_cast<int>(centers.rows());
    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_dist = (points.row(i) - centers.row(0)).squaredNorm();
            for (int c = 1; c < d; ++c) {
                const double dist = (points.row(i) - centers.row(c)).squaredNorm();
                if (dist < best_dist) {
                    best_dist = dist;
                    best = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best) {
                assign[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        if (!changed) break;
        for (int c = 0; c < d; ++c) {
            Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(points.cols());
            int count = 0;
            for (int i = 0; i < n; ++i)
                if (assign[static_cast<std::size_t>(i)] == c) {
                    sum += points.row(i);
                    ++count;
                }
            if (count > 0) centers.row(c) = sum / count;
        }
    }
    return assign;
}

}  // namespace detail

// State-aggregation basis from k-means over per-state coordinates
// (coords row s = embedding of state s). Seeding: the first center is a
// uniformly random point; each further center is the point farthest from
// the chosen centers (ties to the lowest point index). At most 100 Lloyd
// iterations; assignment ties go to the lowest center index.
inline FunctionSet kmeans_aggregation(const Eigen::MatrixXd& coords, int d,
                                      std::uint64_t rng_seed) {
    const int n = static_cast<int>(coords.rows());
    // d must not exceed the number of distinct coordinate vectors
    {
        std::vector<int> distinct;
        for (int i = 0; i < n; ++i) {
            bool dup = false;
            for (int j : distinct)
                if ((coords.row(i) - coords.row(j)).squaredNorm() == 0.0) {
                    dup = true;
                    break;
                }
            if (!dup) distinct.push_back(i);
            if (static_cast<int>(distinct.size()) >= d) break;
        }
        if (d < 1 || static_cast<int>(distinct.size()) < d)
            throw std::invalid_argument("more clusters than distinct coordinate points");
    }

    Rng rng(rng_seed);
    Eigen::MatrixXd centers(d, coords.cols());
    centers.row(0) = coords.row(rng.uniform_int(n));
    std::vector<double> min_dist(static_cast<std::size_t>(n),
                                 std::numeric_limits<double>::infinity());
    for (int c = 1; c < d; ++c) {
        int far = 0;
        double far_dist = -1.0;
        for (int i = 0; i < n; ++i) {
            const double dist = (coords.row(i) - centers.row(c - 1)).squaredNorm();
            double& md = min_dist[static_cast<std::size_t>(i)];
            if (dist < md) md = dist;
            if (md > far_dist) {
                far_dist = md;
                far = i;
            }
        }
        centers.row(c) = coords.row(far);
    }

    const std::vector<int> assign = detail::lloyd_kmeans(coords, centers, 100);

    FunctionSet f;
    f.kind = FunctionSetKind::aggregation_basis;
    f.basis = Eigen::MatrixXd::Zero(n, d);
    f.cluster_of = assign;
    for (int s = 0; s < n; ++s) f.basis(s, assign[static_cast<std::size_t>(s)]) = 1.0;
    return f;
}

// Exact values of n sampled deterministic policies, stacked as columns.
// Requires the true MDP: each column solves the policy's Bellman equation.
inline FunctionSet value_polytope_set(const TabularMdp& mdp, int n_policies,
                                      std::uint64_t rng_seed) {
    const std::vector<TabularPolicy> pols =
        sample_deterministic_policies(n_policies, mdp.n_states(), mdp.n_actions(), rng_seed);
    FunctionSet f;
    f.kind = FunctionSetKind::value_polytope;
    f.basis.resize(mdp.n_states(), n_policies);
    for (int j = 0; j < n_policies; ++j) {
        f.basis.col(j) = evaluate_exact(mdp, pols[static_cast<std::size_t>(j)]);
        std::vector<int> actions(static_cast<std::size_t>(mdp.n_states()));
        for (int s = 0; s < mdp.n_states(); ++s) {
            int act = 0;
            pols[static_cast<std::size_t>(j)].probs.row(s).maxCoeff(&act);
            actions[static_cast<std::size_t>(s)] = act;
        }
        f.policies.push_back(std::move(actions));
    }
    return f;
}

// Random elements of span(V): coefficients uniform in [-1, 1]. When
// coeffs_out is given it receives one coefficient vector per element.
inline std::vector<ValueFunction> span_probe(const FunctionSet& vset, int n_combos,
                                             std::uint64_t rng_seed,
                                             std::vector<Eigen::VectorXd>* coeffs_out = nullptr) {
    Rng rng(rng_seed);
    std::vector<ValueFunction> out;
    out.reserve(static_cast<std::size_t>(n_combos));
    for (int i = 0; i < n_combos; ++i) {
        Eigen::VectorXd c(vset.dim());
        for (int j = 0; j < vset.dim(); ++j) c[j] = rng.uniform_real(-1.0, 1.0);
        out.push_back(vset.basis * c);
        if (coeffs_out) coeffs_out->push_back(std::move(c));
    }
    return out;
}

// Function-set file format: header `state,phi_0,...`, one state per row.
inline void save_function_set_csv(const std::string& path, const FunctionSet& f) {
    std::ofstream out = open_out(path);
    out << "state";
    for (int j = 0; j < f.dim(); ++j) out << ",phi_" << j;
    out << '\n';
    for (int s = 0; s < f.n_states(); ++s) {
        out << s;
        for (int j = 0; j < f.dim(); ++j) out << ',' << format_exact(f.basis(s, j));
        out << '\n';
    }
}

}  // namespace veq
