#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "params.hpp"
#include "rng.hpp"

namespace mfen {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int probes_compared = 0;
  int probes_unresolvable = 0;
  bool loss_finite = true;
  std::string failure;  // parameter path at which the loss went non-finite
};

// The smallest gradient magnitude a central difference can resolve to ~1e-4
// relative accuracy: (f+ - f-) is quantized at a few ulps of |f|, so the
// numeric estimate carries ~|f|*eps/h of absolute noise.
inline double fd_resolve_floor(double loss_magnitude, double h) {
  return 2e4 * std::abs(loss_magnitude) * 2.220446049250313e-16 / h;
}

// Central-difference gradient verification.
//
//   loss_fn  - evaluates the scalar objective (forward only, deterministic)
//   grad_fn  - runs forward + backward once, leaving analytic gradients in
//              the store (including any pseudo-params such as the input)
//
// probe_count entries are sampled across the store; each is perturbed by
// +-h and compared against the analytic value with
// |a - n| / max(|a|, |n|, 1e-8) normalization.
//
// Probes where BOTH the analytic and the numeric magnitude fall under
// resolve_floor are counted as unresolvable rather than compared: the
// difference quotient carries no signal there. A disagreement (one side
// large, the other tiny) is never skipped.
inline GradCheckReport gradcheck(ParamStore<double>& params,
                                 const std::function<double()>& loss_fn,
                                 const std::function<void()>& grad_fn, int probe_count,
                                 double h, std::uint64_t seed, double resolve_floor = 0.0) {
  GradCheckReport rep;
  params.zero_grads();
  grad_fn();

  // snapshot analytic grads before the probing perturbs anything
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic[i] = params[i].grad.data;

  std::vector<std::size_t> sizes(params.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    sizes[i] = params[i].numel();
    total += sizes[i];
  }
  require(total > 0, "gradcheck: empty parameter store");

  Rng rng(seed);
  for (int probe = 0; probe < probe_count; ++probe) {
    // weight the draw by parameter size so big tensors are not under-probed
    std::size_t flat = static_cast<std::size_t>(rng.below(total));
    std::size_t pi = 0;
    while (flat >= sizes[pi]) {
      flat -= sizes[pi];
      ++pi;
    }
    Param<double>& p = params[pi];
    const double saved = p.value.data[flat];
    p.value.data[flat] = saved + h;
    const double fp = loss_fn();
    p.value.data[flat] = saved - h;
    const double fm = loss_fn();
    p.value.data[flat] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.loss_finite = false;
      rep.failure = p.name;
      return rep;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[pi][flat];
    if (std::max(std::abs(a), std::abs(numeric)) < resolve_floor) {
      ++rep.probes_unresolvable;
      continue;
    }
    ++rep.probes_compared;
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = p.name;
      rep.worst_index = flat;
      rep.worst_analytic = a;
      rep.worst_numeric = numeric;
    }
  }
  return rep;
}

}  // namespace mfen
