#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "slab/tensor.hpp"

// Verification suites behind `slab verify`: the re-parameterization identity,
// the SLA order-of-computation equivalence, end-to-end fusion, and
// finite-difference gradient checks. The same routines back the acceptance
// tests.

namespace slab {

struct VerifyOptions {
  uint64_t seed = 2024;
  // Debug hook: offset added to eta on the re-parameterized side of the lemma
  // check. Fault-injection tests use it to prove the suite can fail.
  double eta_perturb = 0.0;
};

struct SuiteResult {
  std::string name;
  bool passed = false;
  double max_err = 0.0;
  int cases = 0;
  std::string detail;
};

SuiteResult verify_lemma(const VerifyOptions& opts = {});
SuiteResult verify_sla(const VerifyOptions& opts = {});
SuiteResult verify_fusion(const VerifyOptions& opts = {});
SuiteResult verify_gradcheck(const VerifyOptions& opts = {});
std::vector<SuiteResult> verify_suites(const std::string& which, const VerifyOptions& opts = {});

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct GradCheckResult {
  double max_rel_err = 0.0;
  long probes = 0;
};

// Central finite differences against the recorded gradient, in double
// precision. `build_loss` must rebuild the scalar loss from the inputs'
// current values on every call.
template <typename Fn>
GradCheckResult gradcheck(Fn&& build_loss, const std::vector<Tensor<double>*>& inputs,
                          double fd_eps = 1e-5) {
  for (auto* t : inputs) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  auto loss = build_loss();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto* t : inputs)
    analytic.push_back(t->grad_ref().empty() ? std::vector<double>(t->size(), 0.0)
                                             : t->grad_ref());
  GradCheckResult res;
  NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto* t = inputs[ti];
    for (size_t j = 0; j < t->size(); ++j) {
      double orig = t->mutable_value()[j];
      t->mutable_value()[j] = orig + fd_eps;
      double fp = build_loss().item();
      t->mutable_value()[j] = orig - fd_eps;
      double fm = build_loss().item();
      t->mutable_value()[j] = orig;
      double numeric = (fp - fm) / (2.0 * fd_eps);
      double a = analytic[ti][j];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / denom);
      ++res.probes;
    }
  }
  for (auto* t : inputs) t->zero_grad();
  return res;
}

}  // namespace slab
