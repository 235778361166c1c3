#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "veq/env.hpp"
#include "veq/function_sets.hpp"

using veq::FunctionSet;
using veq::FunctionSetKind;

TEST_CASE("identity aggregation puts every state in its own cluster") {
    const FunctionSet f = FunctionSet::identity(4);
    CHECK(f.kind == FunctionSetKind::aggregation_basis);
    CHECK(f.basis == Eigen::MatrixXd::Identity(4, 4));
    CHECK(f.cluster_of == std::vector<int>{0, 1, 2, 3});
    CHECK_NOTHROW(f.validate());
}

TEST_CASE("k-means aggregation produces a valid non-degenerate partition") {
    const veq::Environment env = veq::build_catch([] {
        veq::GridSpec g;
        g.env_kind = veq::EnvKind::catch_game;
        g.width = 5;
        g.height = 10;
        return g;
    }());
    const FunctionSet f = veq::kmeans_aggregation(env.coordinates, 50, 99);
    CHECK(f.kind == FunctionSetKind::aggregation_basis);
    CHECK(f.n_states() == 250);
    CHECK(f.dim() == 50);
    CHECK_NOTHROW(f.validate());

    // Every row is one-hot and matches cluster_of; every cluster is used.
    std::set<int> used;
    for (int s = 0; s < f.n_states(); ++s) {
        CHECK(f.basis.row(s).sum() == 1.0);
        CHECK(f.basis(s, f.cluster_of[static_cast<std::size_t>(s)]) == 1.0);
        used.insert(f.cluster_of[static_cast<std::size_t>(s)]);
    }
    CHECK(used.size() == 50);

    // States sharing identical coordinates must share a cluster.
    for (int s = 0; s < f.n_states(); ++s)
        for (int t = s + 1; t < f.n_states(); ++t)
            if ((env.coordinates.row(s) - env.coordinates.row(t)).squaredNorm() == 0.0)
                REQUIRE(f.cluster_of[static_cast<std::size_t>(s)] ==
                        f.cluster_of[static_cast<std::size_t>(t)]);
}

TEST_CASE("k-means is deterministic in the seed") {
    const veq::Environment env = veq::build_four_rooms(veq::GridSpec{});
    const FunctionSet a = veq::kmeans_aggregation(env.coordinates, 12, 5);
    const FunctionSet b = veq::kmeans_aggregation(env.coordinates, 12, 5);
    const FunctionSet c = veq::kmeans_aggregation(env.coordinates, 12, 6);
    CHECK(a.cluster_of == b.cluster_of);
    CHECK(a.basis == b.basis);
    CHECK(a.cluster_of != c.cluster_of);  // different seed, different start center
}

TEST_CASE("k-means refuses more clusters than distinct points") {
    Eigen::MatrixXd coords(4, 1);
    coords << 0.0, 1.0, 0.0, 1.0;  // only two distinct embeddings
    CHECK_NOTHROW(veq::kmeans_aggregation(coords, 2, 0));
    CHECK_THROWS(veq::kmeans_aggregation(coords, 3, 0));
    CHECK_THROWS(veq::kmeans_aggregation(coords, 0, 0));
}

TEST_CASE("polytope columns are exact values of the recorded policies") {
    const veq::Environment env = veq::build_toy_mdp();
    const FunctionSet f = veq::value_polytope_set(env.mdp, 8, 31);
    CHECK(f.kind == FunctionSetKind::value_polytope);
    CHECK(f.dim() == 8);
    REQUIRE(f.policies.size() == 8);
    for (int j = 0; j < 8; ++j) {
        const veq::TabularPolicy pi =
            veq::TabularPolicy::deterministic(f.policies[static_cast<std::size_t>(j)], 2);
        const Eigen::VectorXd v = oracle::power_iteration_value(env.mdp, pi);
        REQUIRE((f.basis.col(j) - v).lpNorm<Eigen::Infinity>() < 1e-8);
    }
    // Deterministic in the seed.
    const FunctionSet g = veq::value_polytope_set(env.mdp, 8, 31);
    CHECK(f.basis == g.basis);
    CHECK(f.policies == g.policies);
}

TEST_CASE("span probes expose their coefficients") {
    const veq::Environment env = veq::build_toy_mdp();
    const FunctionSet f = veq::value_polytope_set(env.mdp, 4, 2);
    std::vector<Eigen::VectorXd> coeffs;
    const std::vector<Eigen::VectorXd> probes = veq::span_probe(f, 6, 17, &coeffs);
    REQUIRE(probes.size() == 6);
    REQUIRE(coeffs.size() == 6);
    for (std::size_t i = 0; i < probes.size(); ++i) {
        REQUIRE(coeffs[i].size() == 4);
        CHECK((coeffs[i].array().abs() <= 1.0).all());
        REQUIRE((probes[i] - f.basis * coeffs[i]).lpNorm<Eigen::Infinity>() < 1e-14);
    }
    // Reproducible, and the coefficient pointer is optional.
    const std::vector<Eigen::VectorXd> again = veq::span_probe(f, 6, 17);
    for (std::size_t i = 0; i < probes.size(); ++i) CHECK(probes[i] == again[i]);
}

TEST_CASE("function-set validation rejects malformed aggregations") {
    FunctionSet f = FunctionSet::identity(3);
    f.basis(0, 0) = 0.5;  // no longer one-hot
    f.basis(0, 1) = 0.5;
    CHECK_THROWS(f.validate());

    FunctionSet g = FunctionSet::identity(3);
    g.cluster_of = {0, 1};  // wrong length
    CHECK_THROWS(g.validate());

    FunctionSet h = FunctionSet::identity(3);
    h.cluster_of = {0, 0, 2};  // disagrees with the identity basis
    CHECK_THROWS(h.validate());

    FunctionSet empty;
    empty.basis.resize(3, 0);
    CHECK_THROWS(empty.validate());

    // Polytope sets skip the one-hot checks entirely.
    FunctionSet poly;
    poly.kind = FunctionSetKind::value_polytope;
    poly.basis = Eigen::MatrixXd::Random(3, 2);
    CHECK_NOTHROW(poly.validate());
}

TEST_CASE("function sets serialize with one state per row") {
    const FunctionSet f = FunctionSet::identity(3);
    const std::string path = "test_function_set.csv";
    veq::save_function_set_csv(path, f);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "state,phi_0,phi_1,phi_2");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    in.close();
    std::remove(path.c_str());
}
