#pragma once

// Finite-difference checks of the four training losses through the whole
// network, with the GAPL bandwidth and confidences frozen to constants.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gscd/gradcheck.hpp"
#include "gscd/model.hpp"
#include "gscd/synth.hpp"

namespace gscd {

struct LossCheckSetup {
  std::size_t batch = 3;
  std::size_t size = 32;
  std::size_t n_classes = 3;
  std::size_t base_channels = 2;
  std::size_t width = 4;
};

inline std::vector<GradcheckResult> loss_gradchecks(std::uint64_t seed, GradcheckOptions opt = {},
                                                    const LossCheckSetup& setup = {}) {
  if (opt.max_coords_per_leaf == 0) opt.max_coords_per_leaf = 3;
  opt.coord_seed = seed;
  // Biases feeding BatchNorm have an exactly zero gradient; compare those
  // in absolute terms rather than as a ratio of two rounding errors.
  opt.norm_floor = std::max(opt.norm_floor, 1e-5);
  ModelConfig mc;
  mc.n_classes = setup.n_classes;
  mc.base_channels = setup.base_channels;
  mc.seg_width = setup.width;
  mc.change_width = setup.width;
  mc.seed = seed;
  Model model(mc);
  // Zero-initialised biases leave whole feature vectors at exactly zero in
  // dead-ReLU regions, where cosine similarity jumps; check at a generic
  // point instead. The uncertainty weights move off 0 for the same reason.
  Rng init(seed + 7);
  for (const auto& p : model.params()) {
    if (p.name.ends_with(".bias")) {
      auto t = p.tensor;
      for (auto& v : t.mutable_data()) v = init.uniform(-0.2, 0.2);
    }
  }
  model.uncertainty().s1.mutable_data()[0] = 0.3;
  model.uncertainty().s2.mutable_data()[0] = -0.2;

  SceneSpec spec;
  spec.height = spec.width = setup.size;
  spec.n_classes = setup.n_classes;
  spec.n_shapes = 3;
  spec.seed = seed;
  const auto ds = generate(spec, setup.batch);
  std::vector<std::size_t> idx(setup.batch);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = make_batch(ds, idx);

  Rng rng(seed + 101);
  ForwardOverrides ov;
  const std::size_t nodes = setup.batch * (setup.size / 32) * (setup.size / 32);
  std::array<Tensor, 2> conf;
  for (auto& c : conf) c = softmax(detail::random_tensor(rng, {nodes, setup.n_classes}, -2.0, 2.0, false), 1);
  ov.confidence = conf;
  {
    NoGradGuard guard;
    const auto r = model.forward(batch.img1, batch.img2, true, ov);
    ov.sigma = r.gapl->sigma;
  }

  std::vector<Tensor> leaves;
  for (const auto& p : model.params()) leaves.push_back(p.tensor);
  auto term = [&](int which) {
    return [&model, &batch, ov, which]() {
      const auto r = model.forward(batch.img1, batch.img2, true, ov);
      const auto l = model.losses(r, batch);
      switch (which) {
        case 0: return l.l_ss;
        case 1: return l.l_cd;
        case 2: return l.l_cpa;
        default: return l.l_merge;
      }
    };
  };
  std::vector<GradcheckResult> out;
  out.push_back(check_gradients("loss L_ss", leaves, term(0), opt));
  out.push_back(check_gradients("loss L_cd", leaves, term(1), opt));
  out.push_back(check_gradients("loss L_cpa", leaves, term(2), opt));
  out.push_back(check_gradients("loss L_merge", leaves, term(3), opt));
  return out;
}

}  // namespace gscd
