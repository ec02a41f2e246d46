#pragma once

// The full network: siamese backbone, segmentation branch (SQMLFI + seg
// head), change branch (BTFF + change head), and the GAPL prototype branch,
// with the four ablation switches.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gscd/backbone.hpp"
#include "gscd/btff.hpp"
#include "gscd/gapl.hpp"
#include "gscd/heads.hpp"
#include "gscd/multitask.hpp"
#include "gscd/nn.hpp"
#include "gscd/sqmlfi.hpp"
#include "gscd/synth.hpp"

namespace gscd {

struct ModelConfig {
  std::size_t n_classes = 4;
  std::size_t base_channels = 8;
  std::size_t seg_width = 32;     // SQMLFI fusion width and seg-head hidden width
  std::size_t change_width = 16;  // BTFF fusion width and change-head hidden width
  bool per_channel_fc = false;
  bool squared_kernel = false;
  double beta = 0.9;
  bool gapl = true;
  bool sqmlfi = true;
  bool btff = true;
  bool mto = true;
  std::uint64_t seed = 0;
};

/// Pooling factor from the stride-4 logits down to the stride-32 graph nodes.
inline constexpr std::size_t kConfidencePool = 8;

struct ForwardOverrides {
  std::optional<std::array<double, 2>> sigma;
  std::optional<std::array<Tensor, 2>> confidence;
  bool skip_prototypes = false;  // evaluation never needs the GAPL branch
};

struct ForwardResult {
  std::array<Tensor, 2> seg_logits;  // full resolution
  Tensor change_logits;              // full resolution
  std::optional<GaplOutput> gapl;
};

struct LossTerms {
  Tensor l_ss;
  Tensor l_cd;
  Tensor l_cpa;    // constant 0 when GAPL is off
  Tensor l_merge;  // with mto off this is the plain sum L_ss + L_cd
  Tensor total;    // the objective the step minimizes
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg)
      : cfg_(cfg),
        rng_(cfg.seed ^ 0x5eedf00dULL),
        backbone_(EncoderConfig{.base_channels = cfg.base_channels, .seed = cfg.seed}),
        sqmlfi_(backbone_.config().channels(), SqmlfiConfig{cfg.seg_width, cfg.per_channel_fc}, rng_),
        seg_head_(seg_in_channels(cfg), cfg.seg_width, cfg.n_classes, rng_),
        btff_(backbone_.config().channels(), BtffConfig{cfg.change_width, !cfg.btff}, rng_),
        change_head_(cfg.change_width, cfg.change_width, rng_),
        gapl_(8 * cfg.base_channels, cfg.n_classes, GaplConfig{cfg.squared_kernel, cfg.beta}, rng_) {
    if (cfg.n_classes < 2) throw ConfigError("n_classes must be at least 2");
    backbone_.register_into(params_);
    if (cfg.sqmlfi) sqmlfi_.register_into(params_);
    seg_head_.register_into(params_);
    btff_.register_into(params_);
    change_head_.register_into(params_);
    if (cfg.gapl) gapl_.register_into(params_);
    if (cfg.mto) uncertainty_.register_into(params_);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamSet& param_set() { return params_; }
  const std::vector<NamedTensor>& params() const { return params_.params(); }
  const std::vector<NamedTensor>& buffers() const { return params_.buffers(); }
  GaplBranch& gapl() { return gapl_; }
  UncertaintyWeights& uncertainty() { return uncertainty_; }

  ForwardResult forward(const Tensor& img1, const Tensor& img2, bool training, const ForwardOverrides& ov = {}) {
    const std::size_t H = img1.dim(2), W = img1.dim(3);
    const auto p1 = backbone_.encode(img1, training);
    const auto p2 = backbone_.encode(img2, training);
    ForwardResult r;
    std::array<Tensor, 2> seg4;
    for (std::size_t t = 0; t < 2; ++t) {
      const auto& p = t == 0 ? p1 : p2;
      const auto merged = cfg_.sqmlfi ? sqmlfi_.forward(p, training) : concat_levels(p);
      seg4[t] = seg_head_.logits(merged);
      r.seg_logits[t] = upsample_logits(seg4[t], H, W);
    }
    r.change_logits = upsample_logits(change_head_.logits(btff_.forward(p1, p2, training)), H, W);
    if (cfg_.gapl && !ov.skip_prototypes) {
      std::array<Tensor, 2> conf;
      if (ov.confidence) {
        conf = *ov.confidence;
      } else {
        for (std::size_t t = 0; t < 2; ++t) conf[t] = pooled_confidence(seg4[t], kConfidencePool);
      }
      r.gapl = gapl_.forward(p1.levels[3], p2.levels[3], conf, ov.sigma);
    }
    return r;
  }

  LossTerms losses(const ForwardResult& r, const Batch& b) const {
    LossTerms l;
    l.l_ss = seg_loss(r.seg_logits[0], r.seg_logits[1], b.y1, b.y2);
    l.l_cd = change_loss(r.change_logits, b.cd);
    l.l_cpa = r.gapl ? r.gapl->loss : Tensor::scalar(0.0);
    l.l_merge = cfg_.mto ? merge_losses(l.l_ss, l.l_cd, uncertainty_) : add(l.l_ss, l.l_cd);
    l.total = add(l.l_merge, l.l_cpa);
    return l;
  }

  void update_bank(const ForwardResult& r) {
    if (r.gapl) gapl_.update_bank(*r.gapl);
  }

 private:
  static std::size_t seg_in_channels(const ModelConfig& cfg) {
    if (cfg.sqmlfi) return cfg.seg_width;
    std::size_t s = 0;
    for (auto c : EncoderConfig{.base_channels = cfg.base_channels}.channels()) s += c;
    return s;
  }

  ModelConfig cfg_;
  Rng rng_;
  ParamSet params_;
  Backbone backbone_;
  Sqmlfi sqmlfi_;
  SegHead seg_head_;
  Btff btff_;
  ChangeHead change_head_;
  GaplBranch gapl_;
  UncertaintyWeights uncertainty_;
};

struct StepStats {
  double l_ss = 0.0;
  double l_cd = 0.0;
  double l_cpa = 0.0;
  double l_merge = 0.0;
  double total = 0.0;
  bool rotated = false;   // a conflict was detected and removed
  double cosine = 0.0;    // between shared-parameter gradients of L_merge and L_cpa
};

/// Gradients for one optimization step. With MTO and GAPL both on, L_merge
/// and L_cpa are back-propagated separately and their shared-parameter
/// gradients are rotated; otherwise the total objective is back-propagated
/// once.
inline GradientList step_gradients(Model& model, const LossTerms& l, StepStats& st,
                                   const std::vector<ParamGroup>& shared = {ParamGroup::Backbone}) {
  const auto& params = model.params();
  model.param_set().zero_grad();
  st.l_ss = l.l_ss.item();
  st.l_cd = l.l_cd.item();
  st.l_cpa = l.l_cpa.item();
  st.l_merge = l.l_merge.item();
  st.total = l.total.item();
  const auto& cfg = model.config();
  if (cfg.mto && cfg.gapl) {
    l.l_merge.backward();
    const auto ga = snapshot_grads(params);
    model.param_set().zero_grad();
    if (l.l_cpa.requires_grad()) l.l_cpa.backward();
    const auto gb = snapshot_grads(params);
    model.param_set().zero_grad();
    CombineStats cs;
    auto g = combine_task_gradients(params, ga, gb, shared, true, &cs);
    st.rotated = cs.conflict;
    st.cosine = cs.cosine;
    return g;
  }
  l.total.backward();
  auto g = snapshot_grads(params);
  model.param_set().zero_grad();
  return g;
}

}  // namespace gscd
