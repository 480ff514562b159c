#pragma once

// Covariate benchmarking: convert analyst-specified strength ratios
// (k_m, k_y) relative to a named observed covariate X_j into sensitivity
// coefficients. The logit-scale conversion is exact:
// beta_u_m = ln(k_m) + beta_xj_m. The outcome-scale conversion is solved
// by a seeded Monte Carlo calibration: find beta_u_y such that, in a
// synthetic population where U ~ N(0, sigma_xj^2) is independent of
// (R, X, C) and enters M on the logit scale with the given beta_u_m, the
// coefficient of U in the regression of Y on (R, X, C, U) - M excluded,
// avoiding the collider path through M - equals k_y * beta_xj_y.
// The equality solution is reported as an upper-bound-style benchmark.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cdsens/dataset.hpp"
#include "cdsens/error.hpp"
#include "cdsens/glm.hpp"
#include "cdsens/rng.hpp"
#include "cdsens/sensem.hpp"

namespace cdsens {

struct BenchmarkSpec {
    int covariate = 0;  // X column index
    double k_m = 1.0;
    double k_y = 1.0;
    int calibration_population = 200000;
    std::uint64_t calibration_seed = 11;
    double calibration_tolerance = 0.01;

    void validate() const {
        if (!(k_m > 0.0)) throw Error("benchmark.spec", "k_m must be positive");
        if (calibration_population < 100000)
            throw Error("benchmark.spec", "calibration population must be >= 10^5");
    }
};

struct BenchmarkFits {
    double beta_xj_m = 0.0;  // logit coef of X_j on M | R, X_-j, C
    double beta_xj_y = 0.0;  // coef of X_j on Y | R, X_-j, C (M excluded)
    double beta_m_y = 0.0;   // coef of M on Y | R, X, C
    double sigma_xj = 0.0;   // residual SD of X_j | R, X_-j, C
    double sigma_m = 0.0;    // residual SD of the linear probability fit of M (diagnostic)
    // nuisance models reused by the calibration generator
    VectorXd m_model_coef;   // logistic M ~ (1, R, X, C)
    VectorXd y_model_coef;   // linear   Y ~ (1, R, X, M, C)
    double y_model_sigma = 0.0;
    int covariate = 0;
};

namespace benchdetail {

// design (1, R, X, C) with optional M column appended before C
inline MatrixXd design_rxc(const Dataset& ds, bool with_m) {
    int p = 2 + ds.px() + (with_m ? 1 : 0) + ds.pc();
    MatrixXd d(ds.n, p);
    for (int i = 0; i < ds.n; ++i) {
        int col = 0;
        d(i, col++) = 1.0;
        d(i, col++) = ds.r[i];
        for (int j = 0; j < ds.px(); ++j) d(i, col++) = ds.x(i, j);
        if (with_m) d(i, col++) = ds.m[i];
        for (int j = 0; j < ds.pc(); ++j) d(i, col++) = ds.c(i, j);
    }
    return d;
}

} // namespace benchdetail

inline BenchmarkFits fit_benchmarks(const Dataset& ds, int covariate) {
    const std::string where = "benchmark.fit_benchmarks";
    if (covariate < 0 || covariate >= ds.px())
        throw Error(where, "benchmark covariate must be an X column");
    BenchmarkFits fits;
    fits.covariate = covariate;
    int xj_col = 2 + covariate;  // position in the (1, R, X, C) design

    MatrixXd d_rxc = benchdetail::design_rxc(ds, false);
    VectorXd ones = VectorXd::Ones(ds.n);

    LogisticFit m_fit = fit_logistic(d_rxc, ds.m, ones);
    fits.beta_xj_m = m_fit.coefficients[xj_col];
    fits.m_model_coef = m_fit.coefficients;

    // M deliberately excluded: conditioning on it opens the collider path
    LinearFit y_fit = fit_wls(d_rxc, ds.y, ones);
    fits.beta_xj_y = y_fit.coefficients[xj_col];

    MatrixXd d_rxmc = benchdetail::design_rxc(ds, true);
    LinearFit ym_fit = fit_wls(d_rxmc, ds.y, ones);
    fits.beta_m_y = ym_fit.coefficients[2 + ds.px()];
    fits.y_model_coef = ym_fit.coefficients;
    fits.y_model_sigma = std::sqrt(ym_fit.residual_variance);

    // residual SD of X_j given R, X_-j, C
    MatrixXd d_noj(ds.n, d_rxc.cols() - 1);
    d_noj << d_rxc.leftCols(xj_col), d_rxc.rightCols(d_rxc.cols() - xj_col - 1);
    VectorXd xj = ds.x.col(covariate);
    LinearFit xj_fit = fit_wls(d_noj, xj, ones);
    fits.sigma_xj = std::sqrt(xj_fit.residual_variance);
    if (!(fits.sigma_xj > 1e-10))
        throw Error(where, "benchmark covariate has zero conditional variance");

    VectorXd m_real = ds.m.cast<double>();
    LinearFit m_lin = fit_wls(d_rxc, m_real, ones);
    fits.sigma_m = std::sqrt(m_lin.residual_variance);
    return fits;
}

inline double convert_km(const BenchmarkSpec& spec, const BenchmarkFits& fits) {
    spec.validate();
    return std::log(spec.k_m) + fits.beta_xj_m;
}

struct CalibrationResult {
    double beta_u_y = 0.0;
    double achieved_coef = 0.0;
    double target_coef = 0.0;
    int bisection_steps = 0;
    double pi_m_u = 0.0;  // avg change in P(M=1) per unit U, diagnostic
};

inline CalibrationResult calibrate_ky(const BenchmarkSpec& spec, const BenchmarkFits& fits,
                                      double beta_u_m, const Dataset& ds) {
    const std::string where = "benchmark.calibrate_ky";
    spec.validate();

    // Synthetic population: resample (R, X, C) rows; attach U independent
    // of them; generate M and Y from the fitted nuisance models. The
    // noise realization is fixed, so the U coefficient is an exact affine
    // function of the candidate beta_u_y and bisection is deterministic.
    int big_n = spec.calibration_population;
    Rng rng(derive_seed(spec.calibration_seed, 0xca11u));
    MatrixXd design(big_n, 3 + ds.px() + ds.pc());  // (1, R, X, C, U)
    VectorXd u(big_n), y_base(big_n);
    double dprob = 0.0;
    for (int i = 0; i < big_n; ++i) {
        int src = static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.n)));
        double ui = rng.normal(0.0, fits.sigma_xj);
        int col = 0;
        design(i, col++) = 1.0;
        design(i, col++) = ds.r[src];
        for (int j = 0; j < ds.px(); ++j) design(i, col++) = ds.x(src, j);
        for (int j = 0; j < ds.pc(); ++j) design(i, col++) = ds.c(src, j);
        design(i, col) = ui;
        u[i] = ui;

        double eta = fits.m_model_coef[0] + fits.m_model_coef[1] * ds.r[src];
        for (int j = 0; j < ds.px(); ++j) eta += fits.m_model_coef[2 + j] * ds.x(src, j);
        for (int j = 0; j < ds.pc(); ++j)
            eta += fits.m_model_coef[2 + ds.px() + j] * ds.c(src, j);
        double p1 = expit(eta + beta_u_m * ui);
        dprob += expit(eta + beta_u_m * (ui + 1.0)) - p1;
        int m = rng.bernoulli(p1) ? 1 : 0;

        double mu = fits.y_model_coef[0] + fits.y_model_coef[1] * ds.r[src];
        for (int j = 0; j < ds.px(); ++j) mu += fits.y_model_coef[2 + j] * ds.x(src, j);
        mu += fits.y_model_coef[2 + ds.px()] * m;
        for (int j = 0; j < ds.pc(); ++j)
            mu += fits.y_model_coef[3 + ds.px() + j] * ds.c(src, j);
        y_base[i] = mu + rng.normal(0.0, fits.y_model_sigma);
    }

    Eigen::ColPivHouseholderQR<MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < design.cols())
        throw Error(where, "rank-deficient calibration design");
    int u_col = static_cast<int>(design.cols()) - 1;
    double target = spec.k_y * fits.beta_xj_y;
    auto coef_u_at = [&](double beta) {
        VectorXd y = y_base + beta * u;
        return qr.solve(y)[u_col];
    };

    double lo = -10.0 * std::fabs(fits.beta_xj_y) - 10.0;
    double hi = 10.0 * std::fabs(fits.beta_xj_y) + 10.0;
    double f_lo = coef_u_at(lo) - target;
    double f_hi = coef_u_at(hi) - target;
    if (f_lo * f_hi > 0.0)
        throw Error(where, "no sign change in bracket [" + std::to_string(lo) + ", " +
                               std::to_string(hi) + "]; f(lo)=" + std::to_string(f_lo) +
                               ", f(hi)=" + std::to_string(f_hi));
    double tol = spec.calibration_tolerance * std::max(std::fabs(fits.beta_xj_y), 1.0);
    CalibrationResult res;
    res.target_coef = target;
    res.pi_m_u = dprob / big_n;
    double mid = 0.0, f_mid = 0.0;
    for (int step = 0; step < 200; ++step) {
        mid = 0.5 * (lo + hi);
        f_mid = coef_u_at(mid) - target;
        ++res.bisection_steps;
        if (std::fabs(f_mid) < tol) break;
        if ((f_mid < 0.0) == (f_lo < 0.0)) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    if (std::fabs(f_mid) >= tol)
        throw Error(where, "tolerance unreachable at this calibration population size");
    res.beta_u_y = mid;
    res.achieved_coef = f_mid + target;
    return res;
}

struct BenchmarkCell {
    double k_m = 0.0, k_y = 0.0;
    double beta_u_m = 0.0, beta_u_y = 0.0;
    bool ok = false;
    std::string error;
    double pct_recommended = 0.0;  // mean over U draws
    DecompositionReport report;
};

struct BenchmarkTable {
    BenchmarkFits fits;
    std::vector<BenchmarkCell> cells;
};

inline BenchmarkTable benchmark_table(const Dataset& ds, int covariate,
                                      const std::vector<std::pair<double, double>>& grid,
                                      const AnalysisOptions& opts, std::uint64_t seed,
                                      int calibration_population = 200000,
                                      double calibration_tolerance = 0.01) {
    BenchmarkTable table;
    table.fits = fit_benchmarks(ds, covariate);
    for (std::size_t cell_idx = 0; cell_idx < grid.size(); ++cell_idx) {
        BenchmarkCell cell;
        cell.k_m = grid[cell_idx].first;
        cell.k_y = grid[cell_idx].second;
        try {
            BenchmarkSpec bspec;
            bspec.covariate = covariate;
            bspec.k_m = cell.k_m;
            bspec.k_y = cell.k_y;
            bspec.calibration_population = calibration_population;
            bspec.calibration_tolerance = calibration_tolerance;
            bspec.calibration_seed = derive_seed(seed, 0xbe9c4u, cell_idx);
            cell.beta_u_m = convert_km(bspec, table.fits);
            cell.beta_u_y = calibrate_ky(bspec, table.fits, cell.beta_u_m, ds).beta_u_y;

            SensitivitySpec sspec;
            sspec.u_kind = SensitivitySpec::UKind::Continuous;
            sspec.sigma_u = table.fits.sigma_xj;  // equal-residual-variance convention
            sspec.beta_u_m = cell.beta_u_m;
            sspec.beta_u_y = cell.beta_u_y;
            SensitivityResult res =
                adjusted_analysis(ds, sspec, opts, derive_seed(seed, 0xce11u, cell_idx));
            double rec = 0.0;
            for (double r : res.recommendation_rate_per_draw) rec += r;
            cell.pct_recommended =
                100.0 * rec / static_cast<double>(res.recommendation_rate_per_draw.size());
            cell.report = res.pooled;
            cell.ok = true;
        } catch (const Error& e) {
            cell.error = e.what();  // failed cells are marked; the run continues
        }
        table.cells.push_back(cell);
    }
    return table;
}

} // namespace cdsens
