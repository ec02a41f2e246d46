#pragma once

// Parameterized layers and the named parameter registry used by the
// optimizer and by checkpoints.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gscd/ops.hpp"
#include "gscd/rng.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

/// Which task path owns a parameter. Backbone parameters are the shared set
/// reached by every loss; the others are exclusive to one task.
enum class ParamGroup { Backbone, Segmentation, Change, Prototype, Uncertainty };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Segmentation: return "segmentation";
    case ParamGroup::Change: return "change";
    case ParamGroup::Prototype: return "prototype";
    case ParamGroup::Uncertainty: return "uncertainty";
  }
  return "?";
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::Backbone;
};

class ParamSet {
 public:
  void add_param(std::string name, Tensor t, ParamGroup group) { params_.push_back({std::move(name), t, group}); }
  void add_buffer(std::string name, Tensor t) { buffers_.push_back({std::move(name), t, ParamGroup::Backbone}); }

  const std::vector<NamedTensor>& params() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

/// Kaiming-uniform (ReLU gain) draw, bound sqrt(6 / fan_in).
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv2d make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, std::size_t pad,
                     Rng& rng) {
    return {kaiming_uniform({cout, cin, kernel, kernel}, cin * kernel * kernel, rng), Tensor::zeros({cout}, true),
            stride, pad};
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

  void register_into(ParamSet& ps, const std::string& prefix, ParamGroup group) const {
    ps.add_param(prefix + ".weight", weight, group);
    ps.add_param(prefix + ".bias", bias, group);
  }
};

struct ConvTranspose2d {
  Tensor weight;  // Cin x Cout x k x k
  Tensor bias;
  std::size_t stride = 2;
  std::size_t pad = 1;

  static ConvTranspose2d make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                              std::size_t pad, Rng& rng) {
    return {kaiming_uniform({cin, cout, kernel, kernel}, cout * kernel * kernel, rng), Tensor::zeros({cout}, true),
            stride, pad};
  }

  Tensor operator()(const Tensor& x) const { return conv_transpose2d(x, weight, bias, stride, pad); }

  void register_into(ParamSet& ps, const std::string& prefix, ParamGroup group) const {
    ps.add_param(prefix + ".weight", weight, group);
    ps.add_param(prefix + ".bias", bias, group);
  }
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm2d make(std::size_t channels) {
    return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), Tensor::zeros({channels}),
            Tensor::full({channels}, 1.0)};
  }

  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  void register_into(ParamSet& ps, const std::string& prefix, ParamGroup group) const {
    ps.add_param(prefix + ".gamma", gamma, group);
    ps.add_param(prefix + ".beta", beta, group);
    ps.add_buffer(prefix + ".running_mean", running_mean);
    ps.add_buffer(prefix + ".running_var", running_var);
  }
};

}  // namespace gscd
