#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cdsens/decompose.hpp"
#include "cdsens/rng.hpp"

using namespace cdsens;

namespace {

Dataset make_ds(int n, int px, int pc) {
    Dataset ds;
    ds.n = n;
    ds.y = VectorXd::Zero(n);
    ds.m = VectorXi::Zero(n);
    ds.r = VectorXi::Zero(n);
    ds.x = MatrixXd::Zero(n, px);
    ds.c = MatrixXd::Zero(n, pc);
    for (int j = 0; j < px; ++j) ds.x_names.push_back("x" + std::to_string(j + 1));
    for (int j = 0; j < pc; ++j) ds.c_names.push_back("c" + std::to_string(j + 1));
    return ds;
}

// generic test population: covariates, confounded mediator, additive outcome
Dataset simulate(int n, std::uint64_t seed) {
    Dataset ds = make_ds(n, 2, 1);
    ds.h1_cols = {0, 1};
    ds.am_cols = {0};
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        ds.c(i, 0) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        ds.r[i] = rng.bernoulli(expit(0.4 - 0.3 * ds.c(i, 0))) ? 1 : 0;
        ds.x(i, 0) = rng.normal() + 0.3 * ds.r[i];
        ds.x(i, 1) = rng.normal();
        ds.m[i] = rng.bernoulli(expit(0.2 - 0.4 * ds.r[i] + 0.3 * ds.x(i, 0))) ? 1 : 0;
        ds.y[i] = 0.5 - 0.6 * ds.r[i] + 0.3 * ds.x(i, 0) - 0.2 * ds.x(i, 1) +
                  ds.m[i] * (0.4 - 0.5 * ds.x(i, 0)) + 0.2 * ds.c(i, 0) + 0.3 * rng.normal();
    }
    return ds;
}

} // namespace

TEST_CASE("initial disparity equals the group mean difference without covariates") {
    Dataset ds = make_ds(4, 0, 0);
    ds.y << 1.0, 3.0, 10.0, 14.0;
    ds.r << 0, 0, 1, 1;
    ds.m << 0, 1, 0, 1;
    CHECK_THAT(estimate_initial_disparity(ds), Catch::Matchers::WithinAbs(10.0, 1e-12));
}

TEST_CASE("ICDE with a constant rule and uniform propensity") {
    // d = 1 everywhere: only M=1 units keep weight (2 each), so the
    // estimand is the group mean difference among the treated
    Dataset ds = make_ds(6, 0, 0);
    ds.y << 1.0, 5.0, 0.0, 7.0, 9.0, 0.0;
    ds.m << 1, 1, 0, 1, 1, 0;
    ds.r << 0, 0, 0, 1, 1, 1;
    VectorXd p = VectorXd::Constant(6, 0.5);
    double z = estimate_icde(ds, DecisionRule::constant(1), p);
    CHECK_THAT(z, Catch::Matchers::WithinAbs(8.0 - 3.0, 1e-12));

    // full-range truncation is a no-op
    DecomposeOptions opts;
    opts.weight_truncation = std::make_pair(0.0, 1.0);
    CHECK_THAT(estimate_icde(ds, DecisionRule::constant(1), p, opts),
               Catch::Matchers::WithinAbs(z, 1e-12));
}

TEST_CASE("ICDE requires compliant units in both groups") {
    Dataset ds = make_ds(4, 0, 0);
    ds.m << 1, 1, 0, 0;
    ds.r << 0, 0, 1, 1;
    ds.y << 1, 2, 3, 4;
    VectorXd p = VectorXd::Constant(4, 0.5);
    CHECK_THROWS_WITH(estimate_icde(ds, DecisionRule::constant(1), p),
                      Catch::Matchers::ContainsSubstring("no rule-compliant"));
}

TEST_CASE("IIE regression satisfies the additive identity zeta = tau - delta") {
    Dataset ds = simulate(300, 77);
    DecisionRule rule = fit_qlearning(ds, false);
    VectorXd p = fit_propensity(ds, true);
    double tau = estimate_initial_disparity(ds);
    for (bool inter : {false, true}) {
        DecomposeOptions opts;
        opts.interaction = inter;
        IieEstimates iie = estimate_iie_regression(ds, rule, p, opts);
        CHECK_THAT(iie.delta + iie.zeta, Catch::Matchers::WithinAbs(tau, 1e-12));
    }
}

TEST_CASE("IIE weighting satisfies the additive identity zeta = tau - delta") {
    Dataset ds = simulate(300, 78);
    DecisionRule rule = fit_qlearning(ds, false);
    VectorXd p = fit_propensity(ds, true);
    double tau = estimate_initial_disparity(ds);
    IieEstimates iie = estimate_iie_weighting(ds, rule, p);
    CHECK_THAT(iie.delta + iie.zeta, Catch::Matchers::WithinAbs(tau, 1e-12));
}

TEST_CASE("IIE disparity reduction vanishes when compliance is group-symmetric") {
    // mirror every unit across groups: the compliance model's group
    // coefficient is exactly zero, so equalizing compliance changes nothing
    Dataset half = simulate(150, 79);
    std::vector<int> rows;
    for (int i = 0; i < half.n; ++i) rows.push_back(i);
    Dataset ds = make_ds(2 * half.n, 2, 1);
    ds.h1_cols = half.h1_cols;
    ds.am_cols = half.am_cols;
    for (int i = 0; i < half.n; ++i) {
        for (int copy = 0; copy < 2; ++copy) {
            int j = 2 * i + copy;
            ds.y[j] = half.y[i];
            ds.m[j] = half.m[i];
            ds.r[j] = copy;  // same unit in both groups
            ds.x.row(j) = half.x.row(i);
            ds.c.row(j) = half.c.row(i);
        }
    }
    DecisionRule rule = fit_qlearning(ds, false);
    VectorXd p = VectorXd::Constant(ds.n, 0.5);
    IieEstimates iie = estimate_iie_regression(ds, rule, p);
    CHECK_THAT(iie.delta, Catch::Matchers::WithinAbs(0.0, 1e-10));
}

TEST_CASE("IIE weighting components match hand computation on a small example") {
    // constant rule d=1, uniform propensity: pi1 is the reference
    // compliance (=treated) rate, arm means are plain averages
    Dataset ds = make_ds(8, 0, 0);
    ds.r << 0, 0, 0, 0, 1, 1, 1, 1;
    ds.m << 1, 1, 1, 0, 1, 1, 0, 0;
    ds.y << 0, 0, 0, 0, 4.0, 6.0, 1.0, 3.0;
    VectorXd p = VectorXd::Constant(8, 0.5);
    IieEstimates iie = estimate_iie_weighting(ds, DecisionRule::constant(1), p);
    // pi1 = 3/4; mixed = .75*mean(4,6) + .25*mean(1,3) = 4.25
    // ey_r1 = mean(Y|R=1) = 3.5, ey_r0 = 0
    CHECK_THAT(iie.delta, Catch::Matchers::WithinAbs(3.5 - 4.25, 1e-12));
    CHECK_THAT(iie.zeta, Catch::Matchers::WithinAbs(4.25 - 0.0, 1e-12));
}

TEST_CASE("all four estimands are invariant to outcome level shifts") {
    Dataset ds = simulate(250, 80);
    DecisionRule rule = fit_qlearning(ds, false);
    DecomposeOptions opts;
    opts.bootstrap_reps = 0;
    Eigen::Vector4d a = decomposition_point_estimates(ds, rule, opts);
    Dataset shifted = ds;
    shifted.y.array() += 5.0;
    Eigen::Vector4d b = decomposition_point_estimates(shifted, rule, opts);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("bootstrap SE of a sample mean matches the analytic rate") {
    int n = 400;
    Dataset ds = make_ds(n, 0, 0);
    Rng rng(99);
    for (int i = 0; i < n; ++i) {
        ds.r[i] = i % 2;
        ds.m[i] = (i / 2) % 2;
        ds.y[i] = rng.normal();
    }
    double sd = std::sqrt((ds.y.array() - ds.y.mean()).square().sum() / (n - 1));
    auto mean_est = [](const Dataset& d) {
        VectorXd v(1);
        v[0] = d.y.mean();
        return v;
    };
    BootstrapResult boot = bootstrap_se(ds, mean_est, 500, 2027);
    CHECK(boot.completed == 500);
    CHECK_THAT(boot.se[0], Catch::Matchers::WithinRel(sd / std::sqrt(n), 0.15));
}

TEST_CASE("bootstrap is deterministic and worker-count independent") {
    Dataset ds = simulate(120, 81);
    DecisionRule rule = fit_qlearning(ds, false);
    DecomposeOptions opts;
    auto est = [&](const Dataset& d) -> VectorXd {
        return decomposition_point_estimates(d, rule, opts);
    };
    BootstrapResult a = bootstrap_se(ds, est, 40, 5, 1);
    BootstrapResult b = bootstrap_se(ds, est, 40, 5, 3);
    CHECK(a.se == b.se);
    BootstrapResult c = bootstrap_se(ds, est, 40, 6, 1);
    CHECK(a.se != c.se);  // a different seed actually changes the draw
}

TEST_CASE("bootstrap reports total failure") {
    Dataset ds = make_ds(4, 0, 0);
    ds.r << 0, 0, 1, 1;
    auto bad = [](const Dataset&) -> VectorXd { throw Error("test", "boom"); };
    CHECK_THROWS_WITH(bootstrap_se(ds, bad, 10, 1),
                      Catch::Matchers::ContainsSubstring("all bootstrap replicates failed"));
}

TEST_CASE("run_decomposition report wiring and percent reductions") {
    Dataset ds = simulate(300, 82);
    DecisionRule rule = fit_qlearning(ds, false);
    DecomposeOptions opts;
    opts.bootstrap_reps = 0;
    DecompositionReport r0 = run_decomposition(ds, rule, opts, 1);
    CHECK(std::isnan(r0.tau.se));

    opts.bootstrap_reps = 60;
    DecompositionReport r = run_decomposition(ds, rule, opts, 1);
    CHECK(r.tau.est == r0.tau.est);
    CHECK(std::isfinite(r.tau.se));
    CHECK(r.tau.se > 0.0);
    CHECK_THAT(r.pct_reduction_icde,
               Catch::Matchers::WithinAbs(
                   100.0 * (r.tau.est - r.zeta_icde.est) / r.tau.est, 1e-10));
    CHECK_THAT(r.pct_reduction_iie,
               Catch::Matchers::WithinAbs(100.0 * r.delta_iie.est / r.tau.est, 1e-10));
    CHECK(r.estimator == "regression");
}

TEST_CASE("percent-reduction arithmetic on published-style magnitudes") {
    // tau = -0.413, zeta_icde = -0.477 -> remaining exceeds initial: -15.5%
    double tau = -0.413, zeta = -0.477, delta = -0.018;
    CHECK_THAT(100.0 * (tau - zeta) / tau, Catch::Matchers::WithinAbs(-15.5, 0.05));
    CHECK_THAT(100.0 * delta / tau, Catch::Matchers::WithinAbs(4.36, 0.005));
}

TEST_CASE("significance stars") {
    CHECK(significance_stars(1.0, 0.6) == "");
    CHECK(significance_stars(1.0, 0.5) == "*");
    CHECK(significance_stars(1.0, 0.38) == "**");
    CHECK(significance_stars(1.0, 0.3) == "***");
    CHECK(significance_stars(1.0, std::numeric_limits<double>::quiet_NaN()) == "");
}
