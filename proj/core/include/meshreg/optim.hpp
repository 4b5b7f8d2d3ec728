#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "meshreg/params.hpp"

namespace meshreg {

/// Linear learning-rate decay: start_factor at iteration 0, end_factor at
/// total_iters, clamped thereafter.
struct LinearSchedule {
  double start_factor = 1.0;
  double end_factor = 0.1;
  std::uint32_t total_iters = 1000;

  void validate() const;
};

double schedule_factor(std::uint32_t iter, const LinearSchedule& sched);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Parameters are grouped; each group has its
/// own base learning rate, and one shared schedule factor scales all of
/// them per step.
class Adam {
 public:
  using Hyper = AdamHyper;

  explicit Adam(Hyper hyper = Hyper{}) : hyper_(hyper) {}

  /// Registers a parameter group; returns its index.
  std::size_t add_group(std::string name, double base_lr, std::vector<ParamSpan> params);

  /// One update over all groups: lr = base_lr * lr_factor. `grads` holds
  /// one flat gradient per group, matching the group's span layout.
  /// Non-finite gradients are a hard error naming the parameter.
  void step(const std::vector<std::vector<double>>& grads, double lr_factor);

  std::uint64_t step_count() const { return step_count_; }
  const Hyper& hyper() const { return hyper_; }

 private:
  struct Group {
    std::string name;
    double base_lr = 0;
    std::vector<ParamSpan> params;
    std::vector<double> m, v;
  };

  Hyper hyper_;
  std::vector<Group> groups_;
  std::uint64_t step_count_ = 0;
};

/// Central-difference gradient check report.
struct GradCheckReport {
  double max_rel_err = 0;
  double mean_rel_err = 0;
  std::size_t coords_checked = 0;
  std::size_t worst_index = 0;
  bool pass = false;
};

/// Compares `analytic` against (f(x+h)-f(x-h))/2h per coordinate. The
/// loss must be deterministic: two base evaluations that differ are a
/// hard error. For large vectors, `max_coords` coordinates are sampled
/// deterministically. Relative error uses |a-n| / max(|a|+|n|, 1e-3) so
/// finite-difference noise on near-zero coordinates does not drown the
/// comparison.
GradCheckReport gradcheck(const std::function<double(const std::vector<double>&)>& loss,
                          std::vector<double> theta, const std::vector<double>& analytic,
                          double h, double tolerance, std::size_t max_coords = SIZE_MAX,
                          std::uint64_t sample_seed = 7);

}  // namespace meshreg
