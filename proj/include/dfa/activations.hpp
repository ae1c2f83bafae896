#pragma once

#include <cmath>
#include <string>

#include "dfa/errors.hpp"
#include "dfa/matrix.hpp"

namespace dfa {

enum class Activation { Identity, Relu, Elu, Tanh };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Elu: return "elu";
        case Activation::Tanh: return "tanh";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "relu") return Activation::Relu;
    if (s == "elu") return Activation::Elu;
    if (s == "tanh") return Activation::Tanh;
    throw ParameterError("unknown activation '" + s + "'");
}

inline double activate(Activation k, double a) {
    switch (k) {
        case Activation::Identity: return a;
        case Activation::Relu: return a > 0.0 ? a : 0.0;
        case Activation::Elu: return a > 0.0 ? a : std::expm1(a);
        case Activation::Tanh: return std::tanh(a);
    }
    return a;
}

// Derivative at pre-activation a. Relu takes the 0 subgradient at the kink.
inline double activate_deriv(Activation k, double a) {
    switch (k) {
        case Activation::Identity: return 1.0;
        case Activation::Relu: return a > 0.0 ? 1.0 : 0.0;
        case Activation::Elu: return a > 0.0 ? 1.0 : std::exp(a);
        case Activation::Tanh: {
            const double t = std::tanh(a);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

inline Matrix activate(Activation k, const Matrix& a) {
    Matrix h = a;
    if (k == Activation::Identity) return h;
    for (auto& v : h.data()) v = activate(k, v);
    return h;
}

inline Matrix activate_deriv(Activation k, const Matrix& a) {
    Matrix d(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        d.data()[i] = activate_deriv(k, a.data()[i]);
    return d;
}

}  // namespace dfa
