#pragma once

// Model + optimizer state as a named-tensor archive.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gscd/model.hpp"
#include "gscd/multitask.hpp"
#include "gscd/serialize.hpp"

namespace gscd {

struct TrainingState {
  std::size_t epochs_done = 0;
};

namespace detail {

inline Tensor flags_tensor(const std::vector<bool>& flags) {
  const std::size_t n = flags.size();
  return Tensor::from({n}, std::vector<double>(flags.begin(), flags.end()));
}

inline Tensor model_meta(const ModelConfig& c) {
  return Tensor::from({14}, {static_cast<double>(c.n_classes), static_cast<double>(c.base_channels),
                             static_cast<double>(c.seg_width), static_cast<double>(c.change_width),
                             double(c.per_channel_fc), double(c.squared_kernel), c.beta, double(c.gapl),
                             double(c.sqmlfi), double(c.btff), double(c.mto),
                             static_cast<double>(c.seed >> 32), static_cast<double>(c.seed & 0xffffffffULL), 1.0});
}

inline ModelConfig model_config_from_meta(const Tensor& m) {
  if (m.numel() != 14) throw FormatError("checkpoint: model metadata has " + std::to_string(m.numel()) + " fields");
  ModelConfig c;
  c.n_classes = static_cast<std::size_t>(m[0]);
  c.base_channels = static_cast<std::size_t>(m[1]);
  c.seg_width = static_cast<std::size_t>(m[2]);
  c.change_width = static_cast<std::size_t>(m[3]);
  c.per_channel_fc = m[4] != 0.0;
  c.squared_kernel = m[5] != 0.0;
  c.beta = m[6];
  c.gapl = m[7] != 0.0;
  c.sqmlfi = m[8] != 0.0;
  c.btff = m[9] != 0.0;
  c.mto = m[10] != 0.0;
  c.seed = (static_cast<std::uint64_t>(m[11]) << 32) | static_cast<std::uint64_t>(m[12]);
  return c;
}

inline void copy_into(Tensor dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw FormatError("checkpoint: " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                      shape_str(dst.shape()));
  }
  auto d = dst.mutable_data();
  std::copy(src.data().begin(), src.data().end(), d.begin());
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, Model& model, const Adam& adam,
                            const TrainingState& state) {
  TensorArchive a;
  a.emplace_back("meta.model", detail::model_meta(model.config()));
  a.emplace_back("meta.train", Tensor::from({2}, {static_cast<double>(state.epochs_done),
                                                  static_cast<double>(adam.steps())}));
  for (const auto& p : model.params()) a.emplace_back("param." + p.name, p.tensor.detach());
  for (const auto& b : model.buffers()) a.emplace_back("buffer." + b.name, b.tensor.detach());
  if (model.config().gapl) {
    const auto& bank = model.gapl().bank();
    for (std::size_t t = 0; t < 2; ++t) {
      const auto tag = std::to_string(t + 1);
      a.emplace_back("bank.global.t" + tag, bank.global(t).detach());
      a.emplace_back("bank.seen.t" + tag, detail::flags_tensor(bank.seen(t)));
    }
  }
  if (adam.steps() > 0) {
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto& p = model.params()[i];
      a.emplace_back("adam.m." + p.name, Tensor::from(p.tensor.shape(), adam.first_moments()[i]));
      a.emplace_back("adam.v." + p.name, Tensor::from(p.tensor.shape(), adam.second_moments()[i]));
    }
  }
  // Write-then-rename keeps the previous checkpoint intact if writing fails.
  auto tmp = path;
  tmp += ".tmp";
  save_archive(tmp, a);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline ModelConfig checkpoint_model_config(const TensorArchive& a) {
  return detail::model_config_from_meta(archive_get(a, "meta.model"));
}

/// Restores parameters, buffers, the prototype bank and (when `adam` is
/// given) optimizer moments into an already constructed model.
inline TrainingState restore_checkpoint(const TensorArchive& a, Model& model, Adam* adam = nullptr) {
  for (const auto& p : model.params()) detail::copy_into(p.tensor, archive_get(a, "param." + p.name), p.name);
  for (const auto& b : model.buffers()) detail::copy_into(b.tensor, archive_get(a, "buffer." + b.name), b.name);
  if (model.config().gapl) {
    auto& bank = model.gapl().bank();
    for (std::size_t t = 0; t < 2; ++t) {
      const auto tag = std::to_string(t + 1);
      detail::copy_into(bank.global(t), archive_get(a, "bank.global.t" + tag), "bank.global.t" + tag);
      const auto& seen = archive_get(a, "bank.seen.t" + tag);
      if (seen.numel() != bank.n_classes()) throw FormatError("checkpoint: prototype bank class count mismatch");
      for (std::size_t k = 0; k < seen.numel(); ++k) bank.seen(t)[k] = seen[k] != 0.0;
    }
  }
  const auto& meta = archive_get(a, "meta.train");
  TrainingState st{static_cast<std::size_t>(meta[0])};
  const auto steps = static_cast<std::size_t>(meta[1]);
  if (adam && steps > 0) {
    auto& m = adam->first_moments();
    auto& v = adam->second_moments();
    m.clear();
    v.clear();
    for (const auto& p : model.params()) {
      const auto& tm = archive_get(a, "adam.m." + p.name);
      const auto& tv = archive_get(a, "adam.v." + p.name);
      if (tm.numel() != p.tensor.numel() || tv.numel() != p.tensor.numel()) {
        throw FormatError("checkpoint: optimizer state for " + p.name + " has the wrong size");
      }
      m.push_back(tm.to_vector());
      v.push_back(tv.to_vector());
    }
    adam->set_steps(steps);
  }
  return st;
}

inline std::unique_ptr<Model> load_model(const std::filesystem::path& path) {
  const auto a = load_archive(path);
  auto model = std::make_unique<Model>(checkpoint_model_config(a));
  restore_checkpoint(a, *model);
  return model;
}

}  // namespace gscd
