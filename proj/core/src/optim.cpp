#include "meshreg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "meshreg/rng.hpp"

namespace meshreg {

void LinearSchedule::validate() const {
  if (!(end_factor > 0) || end_factor > start_factor) {
    throw std::invalid_argument("LinearSchedule: need 0 < end_factor <= start_factor");
  }
  if (total_iters < 1) throw std::invalid_argument("LinearSchedule: total_iters must be >= 1");
}

double schedule_factor(std::uint32_t iter, const LinearSchedule& sched) {
  sched.validate();
  const double progress =
      static_cast<double>(std::min(iter, sched.total_iters)) / static_cast<double>(sched.total_iters);
  return sched.start_factor + (sched.end_factor - sched.start_factor) * progress;
}

std::size_t Adam::add_group(std::string name, double base_lr, std::vector<ParamSpan> params) {
  Group g;
  g.name = std::move(name);
  g.base_lr = base_lr;
  g.params = std::move(params);
  g.m.assign(total_size(g.params), 0.0);
  g.v.assign(total_size(g.params), 0.0);
  groups_.push_back(std::move(g));
  return groups_.size() - 1;
}

void Adam::step(const std::vector<std::vector<double>>& grads, double lr_factor) {
  if (grads.size() != groups_.size()) {
    throw std::invalid_argument("Adam::step: expected " + std::to_string(groups_.size()) +
                                " gradient blocks, got " + std::to_string(grads.size()));
  }
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (grads[g].size() != groups_[g].m.size()) {
      throw std::invalid_argument("Adam::step: gradient size mismatch for group '" +
                                  groups_[g].name + "'");
    }
    for (std::size_t i = 0; i < grads[g].size(); ++i) {
      if (!std::isfinite(grads[g][i])) {
        throw std::runtime_error("Adam::step: non-finite gradient for group '" + groups_[g].name +
                                 "' parameter " + locate(groups_[g].params, i));
      }
    }
  }

  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(hyper_.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper_.beta2, t);

  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    Group& group = groups_[gi];
    const std::vector<double>& grad = grads[gi];
    const double lr = group.base_lr * lr_factor;
    std::size_t off = 0;
    for (const ParamSpan& span : group.params) {
      for (std::size_t i = 0; i < span.size; ++i) {
        const double g = grad[off + i];
        double& m = group.m[off + i];
        double& v = group.v[off + i];
        m = hyper_.beta1 * m + (1.0 - hyper_.beta1) * g;
        v = hyper_.beta2 * v + (1.0 - hyper_.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        span.data[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper_.epsilon);
      }
      off += span.size;
    }
  }
}

GradCheckReport gradcheck(const std::function<double(const std::vector<double>&)>& loss,
                          std::vector<double> theta, const std::vector<double>& analytic,
                          double h, double tolerance, std::size_t max_coords,
                          std::uint64_t sample_seed) {
  if (theta.size() != analytic.size()) {
    throw std::invalid_argument("gradcheck: analytic gradient size mismatch");
  }
  const double base1 = loss(theta);
  const double base2 = loss(theta);
  if (base1 != base2) {
    throw std::runtime_error("gradcheck: loss is not deterministic (two evaluations differ)");
  }

  std::vector<std::size_t> coords(theta.size());
  std::iota(coords.begin(), coords.end(), 0u);
  if (coords.size() > max_coords) {
    // deterministic sample without replacement
    Rng rng(sample_seed);
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }

  GradCheckReport report;
  report.coords_checked = coords.size();
  double sum_rel = 0;
  for (const std::size_t i : coords) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double plus = loss(theta);
    theta[i] = saved - h;
    const double minus = loss(theta);
    theta[i] = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-3);
    sum_rel += rel;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
    }
  }
  report.mean_rel_err = coords.empty() ? 0.0 : sum_rel / static_cast<double>(coords.size());
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace meshreg
