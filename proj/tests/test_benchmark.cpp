#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdsens/benchmark.hpp"
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

// X1 -> M and X1 -> Y with known coefficients
Dataset benchmark_sample(int n, std::uint64_t seed, double bx_m, double bx_y,
                         double bm_y = 0.5) {
    Dataset ds = make_ds(n, 2, 1);
    ds.h1_cols = {0};
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        ds.c(i, 0) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        ds.r[i] = rng.bernoulli(0.5) ? 1 : 0;
        ds.x(i, 0) = 0.5 * ds.r[i] + rng.normal();
        ds.x(i, 1) = rng.normal();
        ds.m[i] = rng.bernoulli(expit(0.2 - 0.3 * ds.r[i] + bx_m * ds.x(i, 0))) ? 1 : 0;
        ds.y[i] = 0.5 - 0.4 * ds.r[i] + bx_y * ds.x(i, 0) + 0.2 * ds.x(i, 1) +
                  bm_y * ds.m[i] + 0.3 * ds.c(i, 0) + 0.5 * rng.normal();
    }
    return ds;
}

} // namespace

TEST_CASE("fit_benchmarks recovers generating coefficients") {
    // hold the mediator's own effect at zero so the M-free outcome
    // regression targets the direct X1 coefficient
    Dataset ds = benchmark_sample(6000, 101, 0.6, 0.4, /*bm_y=*/0.0);
    BenchmarkFits fits = fit_benchmarks(ds, 0);
    CHECK_THAT(fits.beta_xj_m, Catch::Matchers::WithinAbs(0.6, 0.1));
    CHECK_THAT(fits.beta_xj_y, Catch::Matchers::WithinAbs(0.4, 0.03));
    CHECK_THAT(fits.sigma_xj, Catch::Matchers::WithinAbs(1.0, 0.03));
    CHECK(fits.y_model_sigma > 0.0);

    CHECK_THROWS_WITH(fit_benchmarks(ds, 7),
                      Catch::Matchers::ContainsSubstring("X column"));
}

TEST_CASE("outcome benchmark excludes the mediator to avoid the collider path") {
    // X1 affects Y only through M: the M-free coefficient captures the
    // full pathway while the M-adjusted one is near zero
    int n = 8000;
    Dataset ds = make_ds(n, 1, 0);
    Rng rng(102);
    for (int i = 0; i < n; ++i) {
        ds.r[i] = rng.bernoulli(0.5) ? 1 : 0;
        ds.x(i, 0) = rng.normal();
        ds.m[i] = rng.bernoulli(expit(1.2 * ds.x(i, 0))) ? 1 : 0;
        ds.y[i] = 0.8 * ds.m[i] - 0.2 * ds.r[i] + 0.4 * rng.normal();
    }
    BenchmarkFits fits = fit_benchmarks(ds, 0);
    // M-adjusted coefficient (last nuisance fit) vs the benchmark one
    double with_m = fits.y_model_coef[2];  // X1 column in (1, R, X1, M)
    CHECK(std::fabs(with_m) < 0.05);
    CHECK(fits.beta_xj_y > 0.1);
}

TEST_CASE("mediator-scale conversion is exact") {
    BenchmarkFits fits;
    fits.beta_xj_m = 0.37;
    BenchmarkSpec spec;
    spec.k_m = 2.0;
    CHECK(convert_km(spec, fits) == std::log(2.0) + 0.37);
    spec.k_m = 1.0;
    CHECK(convert_km(spec, fits) == fits.beta_xj_m);  // equal strength, exactly
    spec.k_m = -1.0;
    CHECK_THROWS_WITH(convert_km(spec, fits),
                      Catch::Matchers::ContainsSubstring("k_m"));
}

TEST_CASE("outcome calibration hits the target when U is disconnected from M") {
    Dataset ds = benchmark_sample(2000, 103, 0.5, 0.4);
    BenchmarkFits fits = fit_benchmarks(ds, 0);
    BenchmarkSpec spec;
    spec.k_y = 1.0;
    spec.calibration_seed = 5;
    CalibrationResult res = calibrate_ky(spec, fits, /*beta_u_m=*/0.0, ds);
    // with beta_u_m = 0, U is independent noise and the U coefficient is
    // beta_u_y itself up to Monte Carlo error in the base regression
    CHECK_THAT(res.beta_u_y, Catch::Matchers::WithinAbs(fits.beta_xj_y, 0.012));
    CHECK_THAT(res.achieved_coef, Catch::Matchers::WithinAbs(res.target_coef, 0.011));
    CHECK(res.bisection_steps > 0);

    spec.k_y = 2.0;
    CalibrationResult res2 = calibrate_ky(spec, fits, 0.0, ds);
    CHECK_THAT(res2.beta_u_y, Catch::Matchers::WithinAbs(2.0 * fits.beta_xj_y, 0.015));
}

TEST_CASE("calibrated coefficient is monotone in the strength ratio") {
    Dataset ds = benchmark_sample(1500, 104, 0.5, 0.4);
    BenchmarkFits fits = fit_benchmarks(ds, 0);
    BenchmarkSpec spec;
    spec.calibration_seed = 6;
    double prev = -1e9;
    for (double ky : {0.5, 1.0, 2.0, 3.0}) {
        spec.k_y = ky;
        CalibrationResult res = calibrate_ky(spec, fits, convert_km(spec, fits), ds);
        CHECK(res.beta_u_y > prev);
        prev = res.beta_u_y;
    }
}

TEST_CASE("calibration is deterministic in its seed") {
    Dataset ds = benchmark_sample(1000, 105, 0.4, 0.3);
    BenchmarkFits fits = fit_benchmarks(ds, 0);
    BenchmarkSpec spec;
    spec.calibration_seed = 77;
    spec.calibration_tolerance = 0.001;
    CalibrationResult a = calibrate_ky(spec, fits, 0.3, ds);
    CalibrationResult b = calibrate_ky(spec, fits, 0.3, ds);
    CHECK(a.beta_u_y == b.beta_u_y);
    CHECK(a.bisection_steps == b.bisection_steps);
}

TEST_CASE("benchmark_table runs the grid and marks failing cells") {
    Dataset ds = benchmark_sample(400, 106, 0.5, 0.4);
    AnalysisOptions opts;
    opts.S = 3;
    opts.stratify_otr = false;
    opts.decompose.bootstrap_reps = 0;
    opts.em.burn_in = 5;
    opts.em.window = 5;
    opts.em.max_iter = 25;

    std::vector<std::pair<double, double>> grid{{1.0, 1.0}, {-1.0, 1.0}};
    BenchmarkTable table = benchmark_table(ds, 0, grid, opts, 501);
    REQUIRE(table.cells.size() == 2);

    const BenchmarkCell& good = table.cells[0];
    CHECK(good.ok);
    CHECK(good.error.empty());
    CHECK(good.beta_u_m == table.fits.beta_xj_m);  // k_m = 1 is exact
    CHECK(good.pct_recommended >= 0.0);
    CHECK(good.pct_recommended <= 100.0);
    CHECK(std::isfinite(good.report.tau.est));
    CHECK_THAT(good.report.delta_iie.est + good.report.zeta_iie.est,
               Catch::Matchers::WithinAbs(good.report.tau.est, 1e-10));

    const BenchmarkCell& bad = table.cells[1];  // invalid k_m
    CHECK_FALSE(bad.ok);
    CHECK_FALSE(bad.error.empty());
}
