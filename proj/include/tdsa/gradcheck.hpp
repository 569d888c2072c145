#ifndef TDSA_GRADCHECK_HPP_
#define TDSA_GRADCHECK_HPP_

#include <functional>
#include <string>
#include <vector>

#include "tdsa/oracle.hpp"
#include "tdsa/tape.hpp"

namespace tdsa {

// Builds a scalar expression on `tape` from leaves holding `inputs`.
using ExprBuilder = std::function<Var<double>(Tape<double>& tape, const std::vector<Var<double>>& inputs)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::vector<double> per_input;
  std::size_t coordinates = 0;
  std::size_t ties = 0;  // coordinates excluded as non-smooth at the probe scale
};

struct GradCheckOptions {
  oracle::FdConfig fd;
  // Central differences at h, h/2 and h/4; the estimate is the Richardson
  // combination (4 D(h/4) - D(h/2)) / 3, which cancels the h^2 term.
  bool richardson = false;
  // When > 0 (requires richardson): a coordinate whose successive
  // differences disagree by more than this (relative) straddles a max/relu
  // tie; it is counted in `ties` and left out of the comparison.
  double tie_tolerance = 0.0;
};

// Tape gradient of `build` w.r.t. every input vs central finite differences.
inline GradCheckResult gradcheck(const ExprBuilder& build, const std::vector<Tensor4<double>>& inputs,
                                 const GradCheckOptions& opt) {
  std::vector<Tensor4<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
    Var<double> root = build(tape, leaves);
    tape.backward(root);
    for (const auto& v : leaves) {
      const auto& g = tape.grad(v);
      analytic.push_back(g.empty() ? Tensor4<double>(v.shape()) : g);
    }
  }
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor4<double>& probe) {
      Tape<double> tape;
      std::vector<Var<double>> leaves;
      for (std::size_t j = 0; j < inputs.size(); ++j) leaves.push_back(tape.leaf(j == k ? probe : inputs[j]));
      return build(tape, leaves).value().item();
    };
    Tensor4<double> numeric = oracle::fd_gradient(f, inputs[k], opt.fd);
    std::vector<bool> tie(numeric.size(), false);
    if (opt.richardson) {
      const Tensor4<double> half = oracle::fd_gradient(f, inputs[k], oracle::FdConfig{opt.fd.step / 2});
      const Tensor4<double> quarter = oracle::fd_gradient(f, inputs[k], oracle::FdConfig{opt.fd.step / 4});
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        tie[i] = opt.tie_tolerance > 0 && (oracle::rel_error(numeric[i], half[i]) > opt.tie_tolerance ||
                                           oracle::rel_error(half[i], quarter[i]) > opt.tie_tolerance);
        numeric[i] = (4.0 * quarter[i] - half[i]) / 3.0;
      }
    }
    double err = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      ++res.coordinates;
      if (tie[i]) {
        ++res.ties;
        continue;
      }
      err = std::max(err, oracle::rel_error(analytic[k][i], numeric[i]));
    }
    res.per_input.push_back(err);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_input = k;
    }
  }
  return res;
}

inline GradCheckResult gradcheck(const ExprBuilder& build, const std::vector<Tensor4<double>>& inputs,
                                 const oracle::FdConfig& fd = {}) {
  return gradcheck(build, inputs, GradCheckOptions{fd});
}

}  // namespace tdsa

#endif  // TDSA_GRADCHECK_HPP_
