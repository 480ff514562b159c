#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdsens/glm.hpp"
#include "cdsens/rng.hpp"

using namespace cdsens;

TEST_CASE("fit_wls recovers an exact linear relationship") {
    int n = 10;
    MatrixXd d(n, 2);
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        double x = i - 4.5;
        d(i, 0) = 1.0;
        d(i, 1) = x;
        y[i] = 2.0 * x;
    }
    LinearFit fit = fit_wls(d, y, VectorXd::Ones(n));
    CHECK_THAT(fit.coefficients[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(fit.coefficients[1], Catch::Matchers::WithinAbs(2.0, 1e-12));
    CHECK_THAT(fit.residual_variance, Catch::Matchers::WithinAbs(0.0, 1e-20));
}

TEST_CASE("fit_wls intercept-only is the weighted mean") {
    MatrixXd d = MatrixXd::Ones(2, 1);
    VectorXd y(2);
    y << 1.0, 3.0;
    LinearFit fit = fit_wls(d, y, VectorXd::Ones(2));
    CHECK_THAT(fit.coefficients[0], Catch::Matchers::WithinAbs(2.0, 1e-14));
}

TEST_CASE("fit_wls matches the normal-equation oracle on random instances") {
    Rng rng(42);
    for (int rep = 0; rep < 5; ++rep) {
        int n = 50, p = 4;
        MatrixXd d(n, p);
        VectorXd y(n);
        for (int i = 0; i < n; ++i) {
            d(i, 0) = 1.0;
            for (int j = 1; j < p; ++j) d(i, j) = rng.normal();
            y[i] = rng.normal();
        }
        LinearFit fit = fit_wls(d, y, VectorXd::Ones(n));
        // independent route: explicitly solve X'X beta = X'y
        VectorXd oracle = (d.transpose() * d).ldlt().solve(d.transpose() * y);
        CHECK((fit.coefficients - oracle).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("fit_wls offset equals shifting the response") {
    Rng rng(7);
    int n = 30;
    MatrixXd d(n, 2);
    VectorXd y(n), off(n), w(n);
    for (int i = 0; i < n; ++i) {
        d(i, 0) = 1.0;
        d(i, 1) = rng.normal();
        y[i] = rng.normal();
        off[i] = rng.normal();
        w[i] = rng.uniform(0.5, 2.0);
    }
    LinearFit with_offset = fit_wls(d, y, w, off);
    LinearFit shifted = fit_wls(d, VectorXd(y - off), w);
    CHECK((with_offset.coefficients - shifted.coefficients).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("fit_wls error paths") {
    MatrixXd d(3, 2);
    d << 1, 2, 1, 2, 1, 2;  // collinear
    VectorXd y(3);
    y << 1, 2, 3;
    CHECK_THROWS_WITH(fit_wls(d, y, VectorXd::Ones(3)),
                      Catch::Matchers::ContainsSubstring("rank-deficient"));
    MatrixXd d2 = MatrixXd::Ones(3, 1);
    CHECK_THROWS_WITH(fit_wls(d2, y, VectorXd::Zero(3)),
                      Catch::Matchers::ContainsSubstring("weights"));
}

TEST_CASE("fit_logistic null model recovers logit of the base rate") {
    Rng rng(11);
    int n = 500;
    MatrixXd d(n, 2);
    VectorXi m(n);
    int ones = 0;
    for (int i = 0; i < n; ++i) {
        d(i, 0) = 1.0;
        d(i, 1) = rng.normal();
        m[i] = rng.bernoulli(0.5) ? 1 : 0;  // independent of the covariate
        ones += m[i];
    }
    LogisticFit fit = fit_logistic(d, m, VectorXd::Ones(n));
    REQUIRE(fit.converged);
    double base = static_cast<double>(ones) / n;
    CHECK_THAT(fit.coefficients[0],
               Catch::Matchers::WithinAbs(std::log(base / (1 - base)), 0.05));
    CHECK(std::fabs(fit.coefficients[1]) < 0.2);
}

TEST_CASE("fit_logistic attains the grid-search maximum likelihood") {
    Rng rng(13);
    int n = 120;
    MatrixXd d(n, 2);
    VectorXi m(n);
    for (int i = 0; i < n; ++i) {
        d(i, 0) = 1.0;
        d(i, 1) = rng.normal();
        m[i] = rng.bernoulli(expit(0.3 + 0.8 * d(i, 1))) ? 1 : 0;
    }
    auto loglik = [&](double b0, double b1) {
        double ll = 0.0;
        for (int i = 0; i < n; ++i) {
            double eta = b0 + b1 * d(i, 1);
            ll += m[i] * eta - std::log1p(std::exp(eta));
        }
        return ll;
    };
    LogisticFit fit = fit_logistic(d, m, VectorXd::Ones(n));
    double best = -1e300;
    for (double b0 = -5.0; b0 <= 5.0; b0 += 0.05)
        for (double b1 = -5.0; b1 <= 5.0; b1 += 0.05) best = std::max(best, loglik(b0, b1));
    CHECK(loglik(fit.coefficients[0], fit.coefficients[1]) >= best - 1e-6);
}

TEST_CASE("fit_logistic reports separation") {
    int n = 40;
    MatrixXd d(n, 2);
    VectorXi m(n);
    for (int i = 0; i < n; ++i) {
        double x = (i - 19.5) / 10.0;
        d(i, 0) = 1.0;
        d(i, 1) = x;
        m[i] = x > 0 ? 1 : 0;
    }
    CHECK_THROWS_AS(fit_logistic(d, m, VectorXd::Ones(n)), SeparationError);
}

TEST_CASE("fit_logistic is invariant to row duplication vs weight doubling") {
    Rng rng(17);
    int n = 60;
    MatrixXd d(n, 2);
    VectorXi m(n);
    for (int i = 0; i < n; ++i) {
        d(i, 0) = 1.0;
        d(i, 1) = rng.normal();
        m[i] = rng.bernoulli(expit(0.2 * d(i, 1))) ? 1 : 0;
    }
    // duplicate the first row
    MatrixXd d2(n + 1, 2);
    d2.topRows(n) = d;
    d2.row(n) = d.row(0);
    VectorXi m2(n + 1);
    m2.head(n) = m;
    m2[n] = m[0];
    VectorXd w = VectorXd::Ones(n);
    w[0] = 2.0;
    LogisticFit doubled = fit_logistic(d, m, w);
    LogisticFit duplicated = fit_logistic(d2, m2, VectorXd::Ones(n + 1));
    CHECK((doubled.coefficients - duplicated.coefficients).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("predict_prob basics and clamping") {
    LogisticFit fit;
    fit.coefficients = VectorXd::Zero(1);
    MatrixXd d = MatrixXd::Ones(3, 1);
    VectorXd p = predict_prob(fit, d);
    for (int i = 0; i < 3; ++i) CHECK(p[i] == 0.5);

    fit.coefficients[0] = std::log(2.0);
    p = predict_prob(fit, d);
    CHECK_THAT(p[0], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-14));

    fit.coefficients[0] = 100.0;
    p = predict_prob(fit, d);
    CHECK(p[0] == 1.0 - 1e-6);

    MatrixXd wrong = MatrixXd::Ones(2, 3);
    CHECK_THROWS_WITH(predict_prob(fit, wrong),
                      Catch::Matchers::ContainsSubstring("column count"));
}
