#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gprobit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Exception hierarchy. The CLI maps each kind to an exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed input data (bad CSV row, non-binary outcome, ...).
class DataError : public Error {
public:
    using Error::Error;
};

// The requested estimator cannot be run on this design (e.g. R <= G for ML).
class InfeasibleError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class UnsupportedError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

// Symmetrize in place: A <- (A + A') / 2, exactly symmetric afterwards.
inline void symmetrize(Mat& a) {
    for (Index j = 0; j < a.cols(); ++j) {
        for (Index i = j + 1; i < a.rows(); ++i) {
            const double v = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = v;
            a(j, i) = v;
        }
    }
}

// Inverse of a symmetric positive-definite matrix via Cholesky.
// Throws NumericalError when the factorization fails.
inline Mat spd_inverse(const Mat& a, const char* what = "matrix") {
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
        throw NumericalError(std::string(what) + " is not positive definite");
    }
    Mat inv = llt.solve(Mat::Identity(a.rows(), a.cols()));
    symmetrize(inv);
    return inv;
}

inline double spd_logdet(const Mat& a, const char* what = "matrix") {
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
        throw NumericalError(std::string(what) + " is not positive definite");
    }
    const Mat& l = llt.matrixLLT();
    double s = 0.0;
    for (Index i = 0; i < a.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

inline double min_eigenvalue(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

}  // namespace gprobit
