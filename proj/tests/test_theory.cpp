#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "veq/env.hpp"
#include "veq/theory.hpp"

using veq::LinearVeSystem;
using veq::OneDofModel;
using veq::TabularPolicy;

namespace {

// Row-major flattening used by the constraint operator.
Eigen::VectorXd vec_rm(const Eigen::MatrixXd& m) {
    Eigen::VectorXd out(m.size());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[k++] = m(i, j);
    return out;
}

}  // namespace

TEST_CASE("check reports track failures and notes") {
    veq::CheckReport rep;
    rep.name = "demo";
    rep.require(true, "fine");
    CHECK(rep.passed);
    rep.note("extra");
    rep.require(false, "broken");
    CHECK_FALSE(rep.passed);
    REQUIRE(rep.details.size() == 3);
    CHECK(rep.details[0] == "ok:   fine");
    CHECK(rep.details[1] == "note: extra");
    CHECK(rep.details[2] == "FAIL: broken");
    CHECK(veq::format_measure("x", 0.5) == "x = 0.5");
}

TEST_CASE("numerical rank handles constructed cases") {
    CHECK(veq::svd_rank(Eigen::MatrixXd::Identity(4, 4)) == 4);
    CHECK(veq::svd_rank(Eigen::MatrixXd::Zero(3, 5)) == 0);
    CHECK(veq::svd_rank(Eigen::MatrixXd()) == 0);
    Eigen::VectorXd u(3), w(4);
    u << 1.0, -2.0, 0.5;
    w << 0.3, 1.0, 0.0, -1.0;
    CHECK(veq::svd_rank(u * w.transpose()) == 1);
    Eigen::MatrixXd two = u * w.transpose();
    two.row(0) += Eigen::RowVector4d(1.0, 0.0, 0.0, 0.0);
    CHECK(veq::svd_rank(two) == 2);
}

TEST_CASE("the flattening operator reproduces the triple product") {
    veq::Rng rng(700);
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 1 + rng.uniform_int(3), n = 1 + rng.uniform_int(3);
        const int m = 1 + rng.uniform_int(3), l = 1 + rng.uniform_int(3);
        Eigen::MatrixXd a(k, n), b(n, m), c(m, l);
        for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.normal();
        for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = rng.normal();
        const Eigen::MatrixXd d = veq::sandwich_operator(a, c);
        REQUIRE((d * vec_rm(b) - vec_rm(a * b * c)).lpNorm<Eigen::Infinity>() < 1e-12);
    }
}

TEST_CASE("the stacked policy matrix lays out policy-weighted transitions") {
    const int n = 3, n_actions = 2;
    veq::Rng rng(701);
    std::vector<TabularPolicy> policies;
    policies.push_back(TabularPolicy::deterministic({0, 1, 0}, n_actions));
    policies.push_back(veq::detail::random_stochastic_policy(rng, n, n_actions));

    Eigen::MatrixXd p_true(n * n_actions, n);
    for (Eigen::Index r = 0; r < p_true.rows(); ++r)
        p_true.row(r) = rng.stochastic_row(n).transpose();
    Eigen::MatrixXd basis(n, 2);
    for (Eigen::Index i = 0; i < basis.size(); ++i) basis(i) = rng.normal();

    const LinearVeSystem sys = veq::build_linear_ve_system(policies, basis, p_true);

    // Explicit entries: block row i, state s selects pi_i(a|s) at column a*n+s.
    CHECK(sys.pi_hat.rows() == 6);
    CHECK(sys.pi_hat.cols() == 6);
    CHECK(sys.pi_hat(0, 0) == 1.0);  // policy 0 takes action 0 in state 0
    CHECK(sys.pi_hat(1, 4) == 1.0);  // policy 0 takes action 1 in state 1
    CHECK(sys.pi_hat(2, 2) == 1.0);
    CHECK(sys.pi_hat(3, 0) == policies[1].probs(0, 0));
    CHECK(sys.pi_hat(3, 3) == policies[1].probs(0, 1));
    CHECK(sys.pi_hat(3, 1) == 0.0);  // no cross-state coupling

    // pi_hat applied to the stacked block equals each policy's mixed chain.
    const veq::TabularMdp mdp(Eigen::MatrixXd::Zero(n, n_actions),
                              {p_true.topRows(n), p_true.bottomRows(n)}, 0.9);
    const Eigen::MatrixXd mixed = sys.pi_hat * p_true;
    for (std::size_t i = 0; i < policies.size(); ++i) {
        const Eigen::MatrixXd expect = veq::policy_transition(mdp, policies[i]);
        REQUIRE((mixed.middleRows(static_cast<Eigen::Index>(i) * n, n) - expect)
                    .lpNorm<Eigen::Infinity>() < 1e-14);
    }

    // The constraint operator is exactly the flattened triple product.
    REQUIRE((sys.d * vec_rm(p_true) - vec_rm(sys.pi_hat * p_true * basis))
                .lpNorm<Eigen::Infinity>() < 1e-12);

    CHECK_THROWS(veq::build_linear_ve_system(policies, basis, Eigen::MatrixXd::Zero(5, 3)));
}

TEST_CASE("solution-space dimension follows the counting formula") {
    CHECK(veq::check_dimension_bound(3, 2, 2, 3, 81).passed);   // pinned to {0}
    CHECK(veq::check_dimension_bound(3, 2, 1, 2, 82).passed);   // 18 - 6 = 12
    CHECK(veq::check_dimension_bound(3, 2, 0, 3, 83).passed);   // unconstrained
    CHECK(veq::check_dimension_bound(4, 3, 2, 2, 84).passed);   // 48 - 16 = 32
    CHECK(veq::check_dimension_bound(2, 2, 2, 1, 85).passed);
    CHECK_THROWS(veq::check_dimension_bound(3, 2, 3, 3, 86));   // m > |A|
    CHECK_THROWS(veq::check_dimension_bound(3, 2, 2, 4, 87));   // k > |S|

    // Direct nullspace count on a tiny hand-built system: one deterministic
    // policy, one value vector, |S| = 2, |A| = 2 -> 8 - 2 = 6.
    veq::Rng rng(88);
    Eigen::MatrixXd p_true(4, 2);
    for (Eigen::Index r = 0; r < 4; ++r) p_true.row(r) = rng.stochastic_row(2).transpose();
    Eigen::MatrixXd basis(2, 1);
    basis << 1.0, -0.5;
    const LinearVeSystem sys = veq::build_linear_ve_system(
        {TabularPolicy::deterministic({0, 1}, 2)}, basis, p_true);
    CHECK(sys.nullspace_dim() == 6);
}

TEST_CASE("rank products of the flattening operator hold on random instances") {
    const veq::CheckReport rep = veq::check_sandwich_rank(30, 901);
    INFO(rep.details.back());
    CHECK(rep.passed);
    CHECK_THROWS(veq::check_sandwich_rank(0, 1));
}

TEST_CASE("one-parameter transition families build their documented rows") {
    OneDofModel toy;
    toy.theta = Eigen::VectorXd::Constant(2, 0.4);
    CHECK_NOTHROW(toy.validate());
    CHECK((toy.toy_row(0) - Eigen::Vector3d(0.3, 0.4, 0.3)).lpNorm<Eigen::Infinity>() < 1e-15);

    const veq::Environment env = toy.to_environment(0.95);
    CHECK(env.mdp.gamma() == 0.95);
    for (int a = 0; a < 2; ++a)
        CHECK((env.mdp.transition(a).row(0).transpose() - toy.toy_row(a))
                  .lpNorm<Eigen::Infinity>() < 1e-15);

    OneDofModel chain;
    chain.kind = OneDofModel::Kind::diagonal_chain;
    chain.n = 4;
    chain.theta.resize(4);
    chain.theta << 0.1, 0.4, 0.7, 1.0;
    CHECK_NOTHROW(chain.validate());
    const Eigen::MatrixXd p = chain.chain_matrix();
    for (int i = 0; i < 4; ++i) {
        CHECK(p(i, i) == chain.theta[i]);
        CHECK(p.row(i).sum() == Catch::Approx(1.0).margin(1e-14));
        for (int j = 0; j < 4; ++j)
            if (j != i) CHECK(p(i, j) == Catch::Approx((1.0 - chain.theta[i]) / 3.0).margin(1e-15));
    }
    CHECK_THROWS(chain.to_environment());

    OneDofModel bad = toy;
    bad.theta[0] = 1.2;
    CHECK_THROWS(bad.validate());
    OneDofModel tiny = chain;
    tiny.n = 1;
    CHECK_THROWS(tiny.validate());
}

TEST_CASE("projected gradient descent converges and respects the box") {
    const double inner =
        veq::projected_gradient_descent([](double t) { return 2.0 * (t - 0.3); }, 0.9, 0.1, 500);
    CHECK(inner == Catch::Approx(0.3).margin(1e-10));
    const double clamped =
        veq::projected_gradient_descent([](double t) { return 2.0 * (t + 1.0); }, 0.5, 0.1, 500);
    CHECK(clamped == 0.0);  // unconstrained optimum -1 projects to the boundary
    const double upper =
        veq::projected_gradient_descent([](double t) { return 2.0 * (t - 3.0); }, 0.5, 0.1, 500);
    CHECK(upper == 1.0);
}

TEST_CASE("closed-form row fits and their gradient-descent twins agree") {
    CHECK(veq::toy_theta_mle(Eigen::Vector3d(0.3, 0.4, 0.3)) == 0.4);
    CHECK(veq::toy_theta_ve(Eigen::Vector3d(0.3, 0.4, 0.3)) == Catch::Approx(0.4).margin(1e-15));
    CHECK(veq::toy_theta_ve(Eigen::Vector3d(0.6, 0.4, 0.0)) == 0.0);  // clamped at 0
    CHECK(veq::toy_theta_ve(Eigen::Vector3d(0.0, 0.5, 0.5)) == 1.0);  // clamped at 1

    veq::Rng rng(903);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Vector3d row = rng.stochastic_row(3);
        CHECK(std::abs(veq::toy_theta_mle_gd(row) - veq::toy_theta_mle(row)) < 0.02);
        CHECK(std::abs(veq::toy_theta_ve_gd(row) - veq::toy_theta_ve(row)) < 0.02);
    }
}

TEST_CASE("iterate deviation is zero on identical models and exact on one step") {
    const veq::Environment env = veq::build_toy_mdp();
    Eigen::VectorXd v0(3);
    v0 << 2.0, -1.0, 0.5;
    CHECK(veq::max_vi_iterate_deviation(env.mdp, env.mdp, v0, 50) == 0.0);

    OneDofModel other;
    other.theta = Eigen::VectorXd::Constant(2, 0.2);
    const veq::Environment alt = other.to_environment();
    // Hand-computed single update on both models.
    const auto step = [&](const veq::TabularMdp& m) {
        Eigen::VectorXd out(3);
        for (int s = 0; s < 3; ++s) {
            double best = -1e300;
            for (int a = 0; a < 2; ++a) {
                double q = m.reward()(s, a);
                for (int s2 = 0; s2 < 3; ++s2) q += m.gamma() * m.transition(a)(s, s2) * v0[s2];
                best = std::max(best, q);
            }
            out[s] = best;
        }
        return out;
    };
    const double direct = (step(env.mdp) - step(alt.mdp)).lpNorm<Eigen::Infinity>();
    CHECK(veq::max_vi_iterate_deviation(env.mdp, alt.mdp, v0, 1) ==
          Catch::Approx(direct).margin(1e-15));
    CHECK(veq::max_vi_iterate_deviation(env.mdp, alt.mdp, v0, 50) >= direct);
}

TEST_CASE("diagnostic checks pass on fresh seeds") {
    CHECK(veq::check_mle_counterexample(4, 2024).passed);
    CHECK(veq::check_mle_counterexample(5, 2025).passed);
    CHECK_THROWS(veq::check_mle_counterexample(2, 1));
    CHECK(veq::check_toy_closure(30, 2026).passed);
    CHECK(veq::check_exact_ve_example().passed);
    CHECK(veq::check_approx_ve_example().passed);
    CHECK(veq::check_monotonicity_properties(2027).passed);
}

TEST_CASE("the finite-difference audit passes clean and fails corrupted gradients") {
    CHECK(veq::check_gradient_fd(4040).passed);
    CHECK_FALSE(veq::check_gradient_fd(4040, true).passed);
}
