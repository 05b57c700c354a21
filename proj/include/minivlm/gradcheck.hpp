// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient oracle. Central differences per coordinate,
// compared against the tape gradients. Intended for the 64-bit checking
// mode; float loses too many digits for eps around 1e-5.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "minivlm/tensor.hpp"

namespace minivlm {

// fn(tape, inputs) -> scalar Tensor. The analytic pass watches every input
// on a tape; the numeric pass calls fn with unwatched inputs, so nothing
// records and the two computations stay independent.
// Returns max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class Real, class Fn>
Real grad_check(Fn&& fn, std::vector<Tensor<Real>> inputs, Real eps = Real(1e-5)) {
    Tape<Real> tape;
    std::vector<Tensor<Real>> watched;
    watched.reserve(inputs.size());
    for (const auto& in : inputs) watched.push_back(tape.watch(in));
    Tensor<Real> loss = fn(tape, watched);
    if (loss.numel() != 1) throw NotScalarLoss("grad_check: fn must be scalar-valued");
    tape.backward(loss);
    std::vector<std::vector<Real>> analytic;
    for (const auto& w : watched) analytic.push_back(tape.grad(w.node));

    auto eval = [&](const std::vector<Tensor<Real>>& xs) {
        Tape<Real> scratch;
        Tensor<Real> y = fn(scratch, xs);
        return y.data[0];
    };

    Real worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            std::vector<Tensor<Real>> xs = inputs;
            Real orig = xs[i].data[j];
            xs[i].data[j] = orig + eps;
            Real fp = eval(xs);
            xs[i].data[j] = orig - eps;
            Real fm = eval(xs);
            Real numeric = (fp - fm) / (Real(2) * eps);
            Real a = analytic[i][j];
            Real denom = std::max(Real(1e-8), std::abs(a) + std::abs(numeric));
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace minivlm
