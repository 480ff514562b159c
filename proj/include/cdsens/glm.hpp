#pragma once

// Weighted least squares and weighted logistic regression with offsets,
// the shared fitting engine behind every model in the library.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cdsens/error.hpp"

namespace cdsens {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

constexpr double kProbClamp = 1e-6;       // probabilities live in [eps, 1-eps]
constexpr double kSeparationBound = 30.0; // |logit coef| beyond this => separation

struct LinearFit {
    VectorXd coefficients;
    double residual_variance = 0.0;
    std::vector<std::string> design_names;
    bool weights_used = false;

    double predict_one(const Eigen::Ref<const VectorXd>& row) const {
        return coefficients.dot(row);
    }
    VectorXd predict(const MatrixXd& design) const { return design * coefficients; }
};

struct LogisticFit {
    VectorXd coefficients;  // logit scale
    bool converged = false;
    int iterations = 0;
    bool offset_used = false;
    std::vector<std::string> design_names;
};

inline double clamp_prob(double p) {
    if (p < kProbClamp) return kProbClamp;
    if (p > 1.0 - kProbClamp) return 1.0 - kProbClamp;
    return p;
}

inline double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline LinearFit fit_wls(const MatrixXd& design, const VectorXd& y, const VectorXd& w,
                         const std::optional<VectorXd>& offset = {},
                         const std::vector<std::string>& names = {}) {
    const std::string where = "glm.fit_wls";
    const Eigen::Index n = design.rows(), p = design.cols();
    if (y.size() != n || w.size() != n)
        throw Error(where, "dimension mismatch between design, y, and weights");
    if (offset && offset->size() != n) throw Error(where, "offset length mismatch");

    double wsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (w[i] < 0.0) throw Error(where, "negative weight");
        wsum += w[i];
    }
    if (wsum <= 0.0) throw Error(where, "all weights are zero");

    VectorXd target = offset ? VectorXd(y - *offset) : y;
    VectorXd sw = w.array().sqrt();
    MatrixXd a = sw.asDiagonal() * design;
    VectorXd b = sw.asDiagonal() * target;

    Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
    qr.setThreshold(1e-10);
    if (qr.rank() < p)
        throw Error(where, "rank-deficient design (rank " + std::to_string(qr.rank()) +
                               " < " + std::to_string(p) + " columns)");
    LinearFit fit;
    fit.coefficients = qr.solve(b);
    VectorXd resid = target - design * fit.coefficients;
    double rss = (w.array() * resid.array().square()).sum();
    double dof = wsum - static_cast<double>(p);
    fit.residual_variance = dof > 0.0 ? std::max(rss, 0.0) / dof : 0.0;
    fit.design_names = names;
    for (Eigen::Index i = 0; i < n && !fit.weights_used; ++i)
        if (w[i] != w[0]) fit.weights_used = true;
    return fit;
}

inline LogisticFit fit_logistic(const MatrixXd& design, const VectorXi& m, const VectorXd& w,
                                const std::optional<VectorXd>& offset = {},
                                const std::vector<std::string>& names = {}) {
    const std::string where = "glm.fit_logistic";
    const Eigen::Index n = design.rows(), p = design.cols();
    if (m.size() != n || w.size() != n)
        throw Error(where, "dimension mismatch between design, m, and weights");
    if (offset && offset->size() != n) throw Error(where, "offset length mismatch");
    double wsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (m[i] != 0 && m[i] != 1) throw Error(where, "m outside {0,1}");
        if (w[i] < 0.0) throw Error(where, "negative weight");
        wsum += w[i];
    }
    if (wsum <= 0.0) throw Error(where, "all weights are zero");

    LogisticFit fit;
    fit.coefficients = VectorXd::Zero(p);
    fit.offset_used = offset.has_value();
    fit.design_names = names;

    // IRLS with fixed additive offset on the logit scale
    VectorXd eta(n), mu(n), irls_w(n), z(n);
    for (int iter = 0; iter < 100; ++iter) {
        fit.iterations = iter + 1;
        eta = design * fit.coefficients;
        if (offset) eta += *offset;
        for (Eigen::Index i = 0; i < n; ++i) {
            double pi = expit(eta[i]);
            pi = std::min(std::max(pi, 1e-10), 1.0 - 1e-10);
            mu[i] = pi;
            double v = pi * (1.0 - pi);
            irls_w[i] = w[i] * v;
            z[i] = (eta[i] - (offset ? (*offset)[i] : 0.0)) + (m[i] - pi) / v;
        }
        VectorXd sw = irls_w.array().sqrt();
        MatrixXd a = sw.asDiagonal() * design;
        VectorXd b = sw.asDiagonal() * z;
        Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
        qr.setThreshold(1e-10);
        if (qr.rank() < p)
            throw Error(where, "rank-deficient design (rank " + std::to_string(qr.rank()) +
                                   " < " + std::to_string(p) + " columns)");
        VectorXd next = qr.solve(b);
        double max_abs = next.cwiseAbs().maxCoeff();
        if (max_abs > kSeparationBound)
            throw SeparationError(where,
                                  "complete or quasi-complete separation (|coef| = " +
                                      std::to_string(max_abs) + " > 30)");
        double delta = (next - fit.coefficients).cwiseAbs().maxCoeff();
        fit.coefficients = next;
        if (delta < 1e-8) {
            fit.converged = true;
            break;
        }
    }
    return fit;
}

inline VectorXd predict_prob(const LogisticFit& fit, const MatrixXd& design,
                             const std::optional<VectorXd>& offset = {}) {
    const std::string where = "glm.predict_prob";
    if (design.cols() != fit.coefficients.size())
        throw Error(where, "design column count does not match fitted coefficients");
    if (offset && offset->size() != design.rows())
        throw Error(where, "offset length mismatch");
    VectorXd eta = design * fit.coefficients;
    if (offset) eta += *offset;
    VectorXd out(design.rows());
    for (Eigen::Index i = 0; i < design.rows(); ++i) out[i] = clamp_prob(expit(eta[i]));
    return out;
}

} // namespace cdsens
