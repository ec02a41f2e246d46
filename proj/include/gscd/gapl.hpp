#pragma once

// Graph aggregation prototype learning: a Gaussian-kernel relational graph
// over the final-level feature vectors, two GCN layers, confidence-weighted
// class prototypes, cross-temporal affinity consistency, and the EMA
// prototype bank.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gscd/nn.hpp"
#include "gscd/ops.hpp"
#include "gscd/rng.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

inline constexpr double kPresenceEps = 1e-8;
inline constexpr double kPrototypeNormEps = 1e-12;

/// Median Euclidean distance over all unordered row pairs of F (values only).
inline double median_pairwise_distance(const Tensor& F) {
  const std::size_t N = F.dim(0), d = F.dim(1);
  auto fd = F.data();
  std::vector<double> dist;
  dist.reserve(N * (N - 1) / 2);
  for (std::size_t m = 0; m < N; ++m)
    for (std::size_t n = m + 1; n < N; ++n) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = fd[m * d + k] - fd[n * d + k];
        sq += diff * diff;
      }
      dist.push_back(std::sqrt(sq));
    }
  if (dist.empty()) return 0.0;
  const auto mid = dist.begin() + static_cast<long>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double med = *mid;
  if (dist.size() % 2 == 0) med = 0.5 * (med + *std::max_element(dist.begin(), mid));
  return med;
}

/// Bandwidth that puts the kernel value at the median distance at exp(-1/2):
/// sigma = sqrt(median) for the unsquared kernel, sigma = median for the
/// squared one. Falls back to 1 when all features coincide.
inline double median_sigma(const Tensor& F, bool squared_kernel) {
  const double med = median_pairwise_distance(F);
  if (!(med > 0.0)) return 1.0;
  return squared_kernel ? med : std::sqrt(med);
}

inline Tensor build_adjacency(const Tensor& F, double sigma, bool squared_kernel = false) {
  if (F.rank() != 2) throw ShapeError("build_adjacency: expected N_s x d features, got " + shape_str(F.shape()));
  if (F.dim(0) < 2) throw ValueError("build_adjacency: need at least 2 nodes");
  if (!(sigma > 0.0)) throw ValueError("build_adjacency: sigma must be positive");
  return gaussian_adjacency(F, sigma, squared_kernel);
}

/// ReLU(D^-1/2 (A + I) D^-1/2 F W).
inline Tensor gcn_layer(const Tensor& F, const Tensor& A, const Tensor& W) {
  if (A.rank() != 2 || A.dim(0) != A.dim(1) || A.dim(0) != F.dim(0)) {
    throw ShapeError("gcn_layer: adjacency " + shape_str(A.shape()) + " does not match features " +
                     shape_str(F.shape()));
  }
  return relu(matmul(gcn_normalize(A), matmul(F, W)));
}

struct LocalPrototypes {
  Tensor prototypes;          // N_c x d; rows of absent classes are zero
  std::vector<bool> present;  // class observed with enough confidence mass
};

/// Confidence-weighted mean of the aggregated node features per class.
/// `confidence` (N_s x N_c) is used as a constant.
inline LocalPrototypes compute_prototypes(const Tensor& features, const Tensor& confidence,
                                          double eps = kPresenceEps) {
  if (features.rank() != 2 || confidence.rank() != 2 || confidence.dim(0) != features.dim(0)) {
    throw ShapeError("compute_prototypes: confidence " + shape_str(confidence.shape()) + " does not match features " +
                     shape_str(features.shape()));
  }
  const std::size_t Ns = features.dim(0), Nc = confidence.dim(1);
  auto cd = confidence.data();
  std::vector<double> mass(Nc, 0.0);
  for (std::size_t m = 0; m < Ns; ++m)
    for (std::size_t k = 0; k < Nc; ++k) {
      if (cd[m * Nc + k] < 0.0) throw ValueError("compute_prototypes: negative confidence");
      mass[k] += cd[m * Nc + k];
    }
  LocalPrototypes out;
  out.present.resize(Nc);
  std::vector<double> weights(Nc * Ns, 0.0);
  for (std::size_t k = 0; k < Nc; ++k) {
    out.present[k] = mass[k] >= eps;
    if (!out.present[k]) continue;
    for (std::size_t m = 0; m < Ns; ++m) weights[k * Ns + m] = cd[m * Nc + k] / mass[k];
  }
  out.prototypes = matmul(Tensor::from({Nc, Ns}, std::move(weights)), features);
  return out;
}

/// Cosine similarity between every row of P_a and every row of P_b.
inline Tensor affinity(const Tensor& pa, const Tensor& pb) {
  if (pa.rank() != 2 || pa.shape() != pb.shape()) {
    throw ShapeError("affinity: prototype shapes " + shape_str(pa.shape()) + " and " + shape_str(pb.shape()));
  }
  const std::size_t d = pa.dim(1);
  for (const Tensor* p : {&pa, &pb}) {
    auto v = p->data();
    for (std::size_t i = 0; i < p->dim(0); ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) sq += v[i * d + k] * v[i * d + k];
      if (std::sqrt(sq) < kPrototypeNormEps) {
        throw ValueError("affinity: prototype row " + std::to_string(i) + " has zero norm");
      }
    }
  }
  return matmul(normalize(pa, 1), transpose(normalize(pb, 1)));
}

struct AffinityTriple {
  Tensor a11;  // T1 with T1
  Tensor a22;  // T2 with T2
  Tensor a12;  // T1 with T2
};

inline AffinityTriple affinity_triple(const Tensor& p1, const Tensor& p2) {
  return {affinity(p1, p1), affinity(p2, p2), affinity(p1, p2)};
}

/// Mean over entries of |a11 - a22| + |a11 - a12| + |a22 - a12|.
inline Tensor cpa_loss(const AffinityTriple& t) {
  if (t.a11.shape() != t.a22.shape() || t.a11.shape() != t.a12.shape() || t.a11.rank() != 2 ||
      t.a11.dim(0) != t.a11.dim(1)) {
    throw ShapeError("cpa_loss: affinity matrices must share one N_c x N_c shape");
  }
  const double nc = static_cast<double>(t.a11.dim(0));
  auto total = add(add(abs(sub(t.a11, t.a22)), abs(sub(t.a11, t.a12))), abs(sub(t.a22, t.a12)));
  return affine(sum(total), 1.0 / (nc * nc));
}

/// Global per-class prototypes for both temporals, updated as an
/// exponential moving average of detached local prototypes.
class PrototypeBank {
 public:
  PrototypeBank(std::size_t n_classes, std::size_t dim, double beta) : beta_(beta) {
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("prototype momentum must lie in (0, 1)");
    for (auto& g : global_) g = Tensor::zeros({n_classes, dim});
    for (auto& s : seen_) s.assign(n_classes, false);
  }

  double beta() const { return beta_; }
  std::size_t n_classes() const { return global_[0].dim(0); }
  std::size_t dim() const { return global_[0].dim(1); }
  const Tensor& global(std::size_t t) const { return global_.at(t); }
  Tensor& global(std::size_t t) { return global_.at(t); }
  /// Classes that have received at least one update.
  const std::vector<bool>& seen(std::size_t t) const { return seen_.at(t); }
  std::vector<bool>& seen(std::size_t t) { return seen_.at(t); }

  /// global <- beta * global + (1 - beta) * local, present rows only.
  void ema_update(std::size_t t, const Tensor& local, const std::vector<bool>& present) {
    auto& g = global_.at(t);
    if (local.shape() != g.shape() || present.size() != g.dim(0)) {
      throw ShapeError("ema_update: local prototypes " + shape_str(local.shape()) + " vs bank " +
                       shape_str(g.shape()));
    }
    const std::size_t d = g.dim(1);
    auto gd = g.mutable_data();
    auto ld = local.data();
    for (std::size_t k = 0; k < present.size(); ++k) {
      if (!present[k]) continue;
      for (std::size_t j = 0; j < d; ++j) gd[k * d + j] = beta_ * gd[k * d + j] + (1.0 - beta_) * ld[k * d + j];
      seen_[t][k] = true;
    }
  }

 private:
  double beta_;
  std::array<Tensor, 2> global_;
  std::array<std::vector<bool>, 2> seen_;
};

/// Rows of an NCHW map as graph nodes: (B*H*W) x C, ordered by (b, y, x).
inline Tensor flatten_nodes(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("flatten_nodes: expected NCHW, got " + shape_str(x.shape()));
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0) * x.dim(2) * x.dim(3), x.dim(1)});
}

/// Per-node class confidences from segmentation logits at a finer stride:
/// softmax over classes, then average-pooled by `factor` to node resolution.
/// Rows are ordered like flatten_nodes. Values only; never on the tape.
inline Tensor pooled_confidence(const Tensor& logits, std::size_t factor) {
  if (logits.rank() != 4 || logits.dim(2) % factor != 0 || logits.dim(3) % factor != 0) {
    throw ShapeError("pooled_confidence: logits " + shape_str(logits.shape()) + " not divisible by " +
                     std::to_string(factor));
  }
  NoGradGuard guard;
  const auto probs = softmax(logits.detach(), 1);
  const std::size_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::size_t h0 = H / factor, w0 = W / factor;
  std::vector<double> out(B * h0 * w0 * C, 0.0);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t node = (b * h0 + y / factor) * w0 + x / factor;
          out[node * C + c] += probs[((b * C + c) * H + y) * W + x] * inv;
        }
  return Tensor::from({B * h0 * w0, C}, std::move(out));
}

struct GaplConfig {
  bool squared_kernel = false;
  double beta = 0.9;
};

struct GaplOutput {
  Tensor loss;                            // scalar; constant 0 when no class is usable
  std::array<LocalPrototypes, 2> local;   // per temporal
  std::array<double, 2> sigma{};          // bandwidths used this pass
  std::vector<std::size_t> classes;       // classes entering the affinity matrices
};

/// Two shared GCN layers (d -> d -> d) applied to each temporal's graph,
/// prototypes, and the consistency loss against the bank.
class GaplBranch {
 public:
  GaplBranch(std::size_t dim, std::size_t n_classes, const GaplConfig& cfg, Rng& rng)
      : cfg_(cfg),
        w1_(kaiming_uniform({dim, dim}, dim, rng)),
        w2_(kaiming_uniform({dim, dim}, dim, rng)),
        bank_(n_classes, dim, cfg.beta) {}

  const GaplConfig& config() const { return cfg_; }
  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }

  Tensor aggregate(const Tensor& nodes, double sigma) const {
    auto A = build_adjacency(nodes, sigma, cfg_.squared_kernel);
    return gcn_layer(gcn_layer(nodes, A, w1_), A, w2_);
  }

  /// `confidence[t]` is N_s x N_c and treated as a constant. `sigma`
  /// overrides the per-pass median bandwidth.
  GaplOutput forward(const Tensor& x4_t1, const Tensor& x4_t2, const std::array<Tensor, 2>& confidence,
                     const std::optional<std::array<double, 2>>& sigma = std::nullopt) const {
    GaplOutput out;
    const std::array<Tensor, 2> nodes{flatten_nodes(x4_t1), flatten_nodes(x4_t2)};
    const std::size_t Nc = bank_.n_classes(), d = bank_.dim();
    std::array<Tensor, 2> full;
    std::array<std::vector<bool>, 2> usable;
    for (std::size_t t = 0; t < 2; ++t) {
      if (nodes[t].dim(1) != d) {
        throw ShapeError("gapl: feature dim " + std::to_string(nodes[t].dim(1)) + " but bank dim " +
                         std::to_string(d));
      }
      out.sigma[t] = sigma ? (*sigma)[t] : median_sigma(nodes[t].detach(), cfg_.squared_kernel);
      auto agg = aggregate(nodes[t], out.sigma[t]);
      out.local[t] = compute_prototypes(agg, confidence[t].detach());
      if (out.local[t].present.size() != Nc) throw ShapeError("gapl: confidence class count mismatch");
      // A present class whose prototype vanished is treated as absent.
      auto pv = out.local[t].prototypes.data();
      for (std::size_t k = 0; k < Nc; ++k) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += pv[k * d + j] * pv[k * d + j];
        if (std::sqrt(sq) < kPrototypeNormEps) out.local[t].present[k] = false;
      }
      // Present rows come from this batch (on the tape); absent rows fall
      // back to the bank (constants).
      std::vector<double> keep(Nc * d, 0.0), fill(Nc * d, 0.0);
      auto gd = bank_.global(t).data();
      usable[t].assign(Nc, false);
      for (std::size_t k = 0; k < Nc; ++k) {
        double gsq = 0.0;
        for (std::size_t j = 0; j < d; ++j) gsq += gd[k * d + j] * gd[k * d + j];
        const bool from_bank = !out.local[t].present[k] && bank_.seen(t)[k] && std::sqrt(gsq) >= kPrototypeNormEps;
        usable[t][k] = out.local[t].present[k] || from_bank;
        for (std::size_t j = 0; j < d; ++j) {
          keep[k * d + j] = out.local[t].present[k] ? 1.0 : 0.0;
          fill[k * d + j] = from_bank ? gd[k * d + j] : 0.0;
        }
      }
      full[t] = add(mul(out.local[t].prototypes, Tensor::from({Nc, d}, std::move(keep))),
                    Tensor::from({Nc, d}, std::move(fill)));
    }
    for (std::size_t k = 0; k < Nc; ++k) {
      if (usable[0][k] && usable[1][k]) out.classes.push_back(k);
    }
    if (out.classes.empty()) {
      out.loss = Tensor::scalar(0.0);
      return out;
    }
    const std::size_t K = out.classes.size();
    std::vector<double> sel(K * Nc, 0.0);
    for (std::size_t i = 0; i < K; ++i) sel[i * Nc + out.classes[i]] = 1.0;
    const auto selector = Tensor::from({K, Nc}, std::move(sel));
    out.loss = cpa_loss(affinity_triple(matmul(selector, full[0]), matmul(selector, full[1])));
    return out;
  }

  /// EMA step with this pass's local prototypes (values only).
  void update_bank(const GaplOutput& out) {
    for (std::size_t t = 0; t < 2; ++t) bank_.ema_update(t, out.local[t].prototypes.detach(), out.local[t].present);
  }

  void register_into(ParamSet& ps) const {
    ps.add_param("gapl.gcn1.weight", w1_, ParamGroup::Prototype);
    ps.add_param("gapl.gcn2.weight", w2_, ParamGroup::Prototype);
  }

 private:
  GaplConfig cfg_;
  Tensor w1_;
  Tensor w2_;
  PrototypeBank bank_;
};

}  // namespace gscd
