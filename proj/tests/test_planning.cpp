#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "veq/env.hpp"
#include "veq/function_sets.hpp"
#include "veq/planning.hpp"

using veq::FunctionSet;
using veq::LstdConfig;
using veq::TabularMdp;
using veq::TabularPolicy;

TEST_CASE("value-iteration planning on the diagnostic MDP keeps the re-entering action") {
    const veq::Environment env = veq::build_toy_mdp();
    const TabularPolicy pi = veq::plan_value_iteration(env.mdp);
    CHECK(pi.probs(0, 0) == 1.0);
    CHECK(veq::evaluate_policy_mean(env.mdp, pi) ==
          Catch::Approx(veq::evaluate_exact(env.mdp, pi).mean()).margin(1e-15));
}

TEST_CASE("temporal-difference evaluation with exact features recovers the true values") {
    std::mt19937_64 eng(300);
    const TabularMdp mdp = oracle::random_mdp(6, 3, 0.9, eng);
    const TabularPolicy pi = TabularPolicy::deterministic({0, 2, 1, 1, 0, 2}, 3);
    const Eigen::VectorXd v = veq::evaluate_exact(mdp, pi);

    LstdConfig cfg;
    cfg.samples_per_policy = 3000;
    cfg.ridge = 1e-12;
    cfg.rng_seed = 4;
    cfg.expected_next_state = true;
    const FunctionSet idf = FunctionSet::identity(6);
    // Model == environment: every visited-state equation is the exact
    // Bellman row, so the solve returns v_pi up to the ridge perturbation.
    const Eigen::VectorXd w = veq::lstd_evaluate(mdp, pi, idf, cfg, mdp);
    CHECK((w - v).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("sampled next states converge to the same solution") {
    std::mt19937_64 eng(301);
    const TabularMdp mdp = oracle::random_mdp(6, 3, 0.9, eng);
    const TabularPolicy pi = TabularPolicy::deterministic({1, 0, 2, 0, 1, 2}, 3);
    const Eigen::VectorXd v = veq::evaluate_exact(mdp, pi);

    LstdConfig cfg;
    cfg.samples_per_policy = 100000;
    cfg.ridge = 1e-8;
    cfg.rng_seed = 6;
    cfg.expected_next_state = false;
    const Eigen::VectorXd w = veq::lstd_evaluate(mdp, pi, FunctionSet::identity(6), cfg, mdp);
    CHECK((w - v).lpNorm<Eigen::Infinity>() < 0.05);
}

TEST_CASE("evaluation estimates are invariant to feature reparameterization") {
    std::mt19937_64 eng(302);
    const TabularMdp mdp = oracle::random_mdp(6, 2, 0.9, eng);
    const TabularPolicy pi = TabularPolicy::uniform(6, 2);

    FunctionSet phi;
    phi.kind = veq::FunctionSetKind::value_polytope;
    phi.basis = Eigen::MatrixXd::Random(6, 3);
    Eigen::MatrixXd mix(3, 3);
    mix << 2.0, 0.1, 0.0, -1.0, 1.5, 0.3, 0.2, 0.0, 1.0;  // invertible
    FunctionSet mixed = phi;
    mixed.basis = phi.basis * mix;

    LstdConfig cfg;
    cfg.samples_per_policy = 5000;
    cfg.ridge = 1e-12;
    cfg.rng_seed = 11;
    cfg.expected_next_state = true;  // keeps the sampled trajectory basis-independent
    const Eigen::VectorXd w1 = veq::lstd_evaluate(mdp, pi, phi, cfg, mdp);
    const Eigen::VectorXd w2 = veq::lstd_evaluate(mdp, pi, mixed, cfg, mdp);
    CHECK((phi.basis * w1 - mixed.basis * w2).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("zero model reward yields the zero weight vector") {
    std::mt19937_64 eng(303);
    const TabularMdp env = oracle::random_mdp(5, 2, 0.9, eng);
    const TabularMdp model(Eigen::MatrixXd::Zero(5, 2),
                           {env.transition(0), env.transition(1)}, 0.9);
    LstdConfig cfg;
    cfg.samples_per_policy = 500;
    cfg.rng_seed = 2;
    const Eigen::VectorXd w =
        veq::lstd_evaluate(model, TabularPolicy::uniform(5, 2), FunctionSet::identity(5), cfg, env);
    CHECK(w.lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("a constant feature with constant reward solves to the geometric sum") {
    std::mt19937_64 eng(304);
    const TabularMdp shape = oracle::random_mdp(4, 2, 0.9, eng);
    const double c = 0.7;
    const TabularMdp mdp(Eigen::MatrixXd::Constant(4, 2, c),
                         {shape.transition(0), shape.transition(1)}, 0.9);
    FunctionSet ones;
    ones.kind = veq::FunctionSetKind::value_polytope;
    ones.basis = Eigen::MatrixXd::Ones(4, 1);
    LstdConfig cfg;
    cfg.samples_per_policy = 400;
    cfg.ridge = 1e-12;
    cfg.rng_seed = 5;
    cfg.expected_next_state = true;
    const Eigen::VectorXd w =
        veq::lstd_evaluate(mdp, TabularPolicy::uniform(4, 2), ones, cfg, mdp);
    CHECK(w[0] == Catch::Approx(c / (1.0 - 0.9)).margin(1e-9));
}

TEST_CASE("approximate policy iteration with exact features finds an optimal policy") {
    std::mt19937_64 eng(305);
    for (int trial = 0; trial < 5; ++trial) {
        const TabularMdp mdp = oracle::random_mdp(6, 3, 0.9, eng);
        const Eigen::VectorXd v_star = veq::value_iteration(mdp, 1e-12).values;

        LstdConfig cfg;
        cfg.samples_per_policy = 4000;
        cfg.n_iterations = 8;
        cfg.ridge = 1e-10;
        cfg.rng_seed = 700 + static_cast<std::uint64_t>(trial);
        cfg.expected_next_state = true;
        const TabularPolicy pi =
            veq::policy_iteration_lstd(mdp, FunctionSet::identity(6), cfg, mdp);
        const Eigen::VectorXd v = veq::evaluate_exact(mdp, pi);
        REQUIRE((v_star - v).lpNorm<Eigen::Infinity>() < 1e-6);
    }
}

TEST_CASE("policy iteration accepts coarse aggregations and stays deterministic") {
    std::mt19937_64 eng(306);
    const TabularMdp mdp = oracle::random_mdp(6, 2, 0.9, eng);
    FunctionSet coarse;
    coarse.kind = veq::FunctionSetKind::aggregation_basis;
    coarse.cluster_of = {0, 0, 1, 1, 2, 2};
    coarse.basis = Eigen::MatrixXd::Zero(6, 3);
    for (int s = 0; s < 6; ++s) coarse.basis(s, coarse.cluster_of[static_cast<std::size_t>(s)]) = 1.0;

    LstdConfig cfg;
    cfg.samples_per_policy = 2000;
    cfg.n_iterations = 5;
    cfg.rng_seed = 9;
    const TabularPolicy a = veq::policy_iteration_lstd(mdp, coarse, cfg, mdp);
    const TabularPolicy b = veq::policy_iteration_lstd(mdp, coarse, cfg, mdp);
    CHECK_NOTHROW(a.validate());
    CHECK(a.probs == b.probs);
}

TEST_CASE("rollout returns approach the exact mean value") {
    const veq::Environment env = veq::build_toy_mdp(0.9);
    const TabularPolicy pi = TabularPolicy::uniform(3, 2);
    const double exact = veq::evaluate_policy_mean(env.mdp, pi);
    const double rolled =
        veq::evaluate_policy_rollout(env.mdp, env.entry_reward, pi, 4000, 300, 71);
    CHECK(std::abs(rolled - exact) < 0.05);
}

TEST_CASE("evaluation configs reject non-positive fields") {
    LstdConfig cfg;
    cfg.samples_per_policy = 0;
    CHECK_THROWS(cfg.validate());
    cfg = LstdConfig{};
    cfg.n_iterations = 0;
    CHECK_THROWS(cfg.validate());
    cfg = LstdConfig{};
    cfg.ridge = 0.0;
    CHECK_THROWS(cfg.validate());
    CHECK_NOTHROW(LstdConfig{}.validate());
}

TEST_CASE("result rows serialize in the documented column order") {
    CHECK(veq::experiment_csv_header() ==
          "env,method,strategy,rank,dim_v,seed,mean_value,final_loss,steps");
    veq::ExperimentResult r;
    r.env = "toy";
    r.method = "ve";
    r.strategy = "none";
    r.rank = 2;
    r.dim_v = 3;
    r.seed = 9;
    r.mean_value = 1.5;
    r.final_loss = 0.25;
    r.steps = 100;
    CHECK(veq::to_csv_row(r) == "toy,ve,none,2,3,9,1.5,0.25,100");
}
