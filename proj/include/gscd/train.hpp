#pragma once

// Run configuration, the training/evaluation loops, and the ablation sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gscd/checkpoint.hpp"
#include "gscd/metrics.hpp"
#include "gscd/model.hpp"
#include "gscd/synth.hpp"

namespace gscd {

struct RunConfig {
  std::string data;      // training split directory
  std::string val_data;  // optional held-out split
  std::string out = "run";
  std::string resume;    // checkpoint to continue from
  double lr = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::size_t base_channels = 8;
  std::size_t seg_width = 32;
  std::size_t change_width = 16;
  bool per_channel_fc = false;
  std::string sigma_mode = "median";  // median | fixed
  double sigma = 1.0;
  bool squared_kernel = false;
  double beta = 0.9;
  bool gapl = true;
  bool sqmlfi = true;
  bool btff = true;
  bool mto = true;
  std::string optimizer = "adam";  // adam | sgd
  double weight_decay = 1e-6;
  std::string lr_schedule = "cosine";  // cosine | constant
  bool shuffle = true;
  std::size_t eval_every = 1;  // 0 evaluates after the last epoch only
  std::size_t stop_after = 0;  // end this invocation after that many total epochs; 0 runs to `epochs`
  std::uint64_t seed = 0;

  ModelConfig model_config(std::size_t n_classes) const {
    ModelConfig m;
    m.n_classes = n_classes;
    m.base_channels = base_channels;
    m.seg_width = seg_width;
    m.change_width = change_width;
    m.per_channel_fc = per_channel_fc;
    m.squared_kernel = squared_kernel;
    m.beta = beta;
    m.gapl = gapl;
    m.sqmlfi = sqmlfi;
    m.btff = btff;
    m.mto = mto;
    m.seed = seed;
    return m;
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(d)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::out_of_range&) {
    throw ConfigError(key + ": value out of range");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Binds every RunConfig key to a setter and a formatter, in echo order.
class ConfigSchema {
 public:
  explicit ConfigSchema(RunConfig& c) {
    str("data", c.data);
    str("val_data", c.val_data);
    str("out", c.out);
    str("resume", c.resume);
    num("lr", c.lr);
    uint("epochs", c.epochs);
    uint("batch_size", c.batch_size);
    uint("base_channels", c.base_channels);
    uint("seg_width", c.seg_width);
    uint("change_width", c.change_width);
    flag("per_channel_fc", c.per_channel_fc);
    str("sigma_mode", c.sigma_mode);
    num("sigma", c.sigma);
    flag("squared_kernel", c.squared_kernel);
    num("beta", c.beta);
    flag("gapl", c.gapl);
    flag("sqmlfi", c.sqmlfi);
    flag("btff", c.btff);
    flag("mto", c.mto);
    str("optimizer", c.optimizer);
    num("weight_decay", c.weight_decay);
    str("lr_schedule", c.lr_schedule);
    flag("shuffle", c.shuffle);
    uint("eval_every", c.eval_every);
    uint("stop_after", c.stop_after);
    uint64("seed", c.seed);
  }

  void set(const std::string& key, const std::string& value) {
    auto it = setters_.find(key);
    if (it == setters_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value);
  }

  std::string echo() const {
    std::ostringstream os;
    for (const auto& k : order_) os << k << "=" << getters_.at(k)() << "\n";
    return os.str();
  }

 private:
  void add(const std::string& k, std::function<void(const std::string&)> s, std::function<std::string()> g) {
    order_.push_back(k);
    setters_[k] = std::move(s);
    getters_[k] = std::move(g);
  }
  void str(const std::string& k, std::string& f) {
    add(k, [&f](const std::string& v) { f = v; }, [&f] { return f; });
  }
  void num(const std::string& k, double& f) {
    add(k, [&f, k](const std::string& v) { f = detail::parse_double(k, v); }, [&f] { return format_double(f); });
  }
  void uint(const std::string& k, std::size_t& f) {
    add(k, [&f, k](const std::string& v) { f = static_cast<std::size_t>(detail::parse_uint(k, v)); },
        [&f] { return std::to_string(f); });
  }
  void uint64(const std::string& k, std::uint64_t& f) {
    add(k, [&f, k](const std::string& v) { f = detail::parse_uint(k, v); }, [&f] { return std::to_string(f); });
  }
  void flag(const std::string& k, bool& f) {
    add(k, [&f, k](const std::string& v) { f = detail::parse_bool(k, v); }, [&f] { return std::string(f ? "true" : "false"); });
  }

  std::vector<std::string> order_;
  std::map<std::string, std::function<void(const std::string&)>> setters_;
  std::map<std::string, std::function<std::string()>> getters_;
};

/// Applies `key=value` lines; blank lines and `#` comments are skipped.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  ConfigSchema schema(c);
  std::istringstream is(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(no) + ": expected key=value");
    schema.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  apply_config_text(c, os.str());
}

inline std::string echo_config(RunConfig c) { return ConfigSchema(c).echo(); }

inline void validate(const RunConfig& c) {
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.base_channels == 0 || c.seg_width == 0 || c.change_width == 0) throw ConfigError("widths must be positive");
  if (!(c.lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(c.beta > 0.0 && c.beta < 1.0)) throw ConfigError("beta must lie in (0, 1)");
  if (c.sigma_mode != "median" && c.sigma_mode != "fixed") throw ConfigError("sigma_mode must be median or fixed");
  if (c.sigma_mode == "fixed" && !(c.sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (c.optimizer != "adam" && c.optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (c.lr_schedule != "cosine" && c.lr_schedule != "constant") throw ConfigError("lr_schedule must be cosine or constant");
}

// ---------------------------------------------------------------------------
// Evaluation

struct Predictions {
  std::vector<int> seg1, seg2, cd;
};

inline Predictions predict(Model& model, const Batch& b) {
  NoGradGuard guard;
  ForwardOverrides ov;
  ov.skip_prototypes = true;
  const auto r = model.forward(b.img1, b.img2, false, ov);
  return {argmax_classes(r.seg_logits[0]), argmax_classes(r.seg_logits[1]), argmax_classes(r.change_logits)};
}

inline ConfusionMatrix evaluate(Model& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.spec.n_classes != model.config().n_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.spec.n_classes) + " classes, model was built for " +
                      std::to_string(model.config().n_classes));
  }
  ConfusionMatrix cm(model.config().n_classes);
  for (std::size_t s = 0; s < ds.samples.size(); s += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.samples.size(), s + batch_size); ++i) idx.push_back(i);
    const auto b = make_batch(ds, idx);
    const auto p = predict(model, b);
    cm.accumulate(p.seg1, p.seg2, b.y1, b.y2, p.cd, b.cd);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_ss = 0.0, l_cd = 0.0, l_cpa = 0.0, l_merge = 0.0, total = 0.0;
  double rotated_fraction = 0.0;
  double sigma_sq_seg = 1.0, sigma_sq_change = 1.0;
  std::optional<ScdScores> train_scores;
  std::optional<ScdScores> val_scores;
};

inline std::string history_header() {
  return "epoch,lr,l_ss,l_cd,l_cpa,l_merge,l_total,rotated_fraction,sigma_sq_seg,sigma_sq_change,"
         "train_oa,train_miou,train_sek,train_fscd,val_oa,val_miou,val_sek,val_fscd";
}

inline std::string history_row(const EpochRecord& r) {
  std::ostringstream os;
  os << r.epoch;
  for (double v : {r.lr, r.l_ss, r.l_cd, r.l_cpa, r.l_merge, r.total, r.rotated_fraction, r.sigma_sq_seg,
                   r.sigma_sq_change})
    os << "," << format_double(v);
  for (const auto* s : {&r.train_scores, &r.val_scores}) {
    if (*s) {
      os << "," << format_double((*s)->oa) << "," << format_double((*s)->miou) << "," << format_double((*s)->sek)
         << "," << format_double((*s)->fscd);
    } else {
      os << ",,,,";
    }
  }
  return os.str();
}

struct TrainResult {
  std::vector<EpochRecord> history;
  ScdScores train_scores;
  std::optional<ScdScores> val_scores;
  std::filesystem::path run_dir;
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (shuffle) {
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  }
  return idx;
}

inline std::string final_report(const TrainResult& r, std::size_t epochs) {
  std::ostringstream os;
  os << "epochs=" << epochs << "\n";
  if (!r.history.empty()) {
    const auto& h = r.history.back();
    os << "l_ss=" << format_double(h.l_ss) << "\nl_cd=" << format_double(h.l_cd) << "\nl_cpa=" << format_double(h.l_cpa)
       << "\nl_merge=" << format_double(h.l_merge) << "\n";
  }
  std::istringstream tr(scores_report(r.train_scores));
  for (std::string line; std::getline(tr, line);) os << "train_" << line << "\n";
  if (r.val_scores) {
    std::istringstream vr(scores_report(*r.val_scores));
    for (std::string line; std::getline(vr, line);) os << "val_" << line << "\n";
  }
  return os.str();
}

/// Trains per `cfg`, writing config.txt, history.csv, checkpoint.gckpt and
/// report.txt into cfg.out. A non-finite value aborts with NumericError and
/// leaves the checkpoint of the last completed epoch in place.
inline TrainResult train(const RunConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  if (cfg.data.empty()) throw ConfigError("data is required");
  const auto ds = load_dataset(cfg.data);
  if (ds.samples.empty()) throw ConfigError("training split " + cfg.data + " has no samples");
  std::optional<Dataset> val;
  if (!cfg.val_data.empty()) val = load_dataset(cfg.val_data);

  TrainResult res;
  res.run_dir = cfg.out;
  std::error_code ec;
  std::filesystem::create_directories(res.run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + cfg.out + ": " + ec.message());
  {
    std::ofstream os(res.run_dir / "config.txt");
    if (!os) throw IoError("cannot write config echo");
    os << echo_config(cfg);
  }

  Model model(cfg.model_config(ds.spec.n_classes));
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  TrainingState state;
  if (!cfg.resume.empty()) {
    const auto a = load_archive(cfg.resume);
    const auto saved = checkpoint_model_config(a);
    const auto ours = model.config();
    if (detail::model_meta(saved).to_vector() != detail::model_meta(ours).to_vector()) {
      throw ConfigError("checkpoint " + cfg.resume + " was written for a different model configuration");
    }
    state = restore_checkpoint(a, model, &adam);
  }
  const auto ckpt = res.run_dir / "checkpoint.gckpt";
  save_checkpoint(ckpt, model, adam, state);

  std::ofstream csv(res.run_dir / "history.csv");
  if (!csv) throw IoError("cannot write history.csv");
  csv << history_header() << "\n";

  ForwardOverrides ov;
  if (cfg.sigma_mode == "fixed") ov.sigma = std::array<double, 2>{cfg.sigma, cfg.sigma};
  const std::size_t n = ds.samples.size();

  const std::size_t end = cfg.stop_after ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;
  for (std::size_t epoch = state.epochs_done; epoch < end; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = cfg.lr_schedule == "cosine" ? cosine_lr(cfg.lr, epoch, cfg.epochs) : cfg.lr;
    const auto order = epoch_order(n, cfg.seed, epoch, cfg.shuffle);
    std::size_t steps = 0, rotated = 0;
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(s),
                                         order.begin() + static_cast<long>(std::min(n, s + cfg.batch_size)));
      const auto batch = make_batch(ds, idx);
      StepStats st;
      try {
        const auto r = model.forward(batch.img1, batch.img2, true, ov);
        const auto l = model.losses(r, batch);
        const auto g = step_gradients(model, l, st);
        if (cfg.optimizer == "adam") adam.step(model.params(), g, rec.lr);
        else sgd_step(model.params(), g, rec.lr);
        model.update_bank(r);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(steps + 1) + "); last good checkpoint: " + ckpt.string());
      }
      rec.l_ss += st.l_ss;
      rec.l_cd += st.l_cd;
      rec.l_cpa += st.l_cpa;
      rec.l_merge += st.l_merge;
      rec.total += st.total;
      rotated += st.rotated;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    rec.l_ss *= inv, rec.l_cd *= inv, rec.l_cpa *= inv, rec.l_merge *= inv, rec.total *= inv;
    rec.rotated_fraction = static_cast<double>(rotated) * inv;
    if (cfg.mto) {
      rec.sigma_sq_seg = model.uncertainty().sigma_sq1();
      rec.sigma_sq_change = model.uncertainty().sigma_sq2();
    }
    const bool last = epoch + 1 == end;
    if (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0)) {
      rec.train_scores = scores(evaluate(model, ds, cfg.batch_size));
      if (val) rec.val_scores = scores(evaluate(model, *val, cfg.batch_size));
    }
    state.epochs_done = epoch + 1;
    save_checkpoint(ckpt, model, adam, state);
    csv << history_row(rec) << "\n" << std::flush;
    if (log) {
      *log << "epoch " << rec.epoch << " lr=" << rec.lr << " l_ss=" << rec.l_ss << " l_cd=" << rec.l_cd
           << " l_cpa=" << rec.l_cpa << " l_merge=" << rec.l_merge;
      if (rec.train_scores) *log << " train_miou=" << rec.train_scores->miou;
      if (rec.val_scores) *log << " val_miou=" << rec.val_scores->miou;
      *log << "\n";
    }
    res.history.push_back(rec);
  }
  res.train_scores = scores(evaluate(model, ds, cfg.batch_size));
  if (val) res.val_scores = scores(evaluate(model, *val, cfg.batch_size));
  std::ofstream rep(res.run_dir / "report.txt");
  if (!rep) throw IoError("cannot write report.txt");
  rep << final_report(res, cfg.epochs);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation sweep

struct AblationVariant {
  std::string name;
  bool gapl, sqmlfi, btff, mto;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"full", true, true, true, true},
          {"no_gapl", false, true, true, true},
          {"no_sqmlfi", true, false, true, true},
          {"no_btff", true, true, false, true},
          {"no_mto", true, true, true, false}};
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  ScdScores scores;
};

struct AblationSummary {
  std::vector<AblationRow> rows;
  std::map<std::string, double> mean_miou;
};

/// Trains every variant for every seed under cfg.out/<variant>/seed<k> and
/// scores each on the validation split (or the training split if none).
inline AblationSummary run_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                    std::ostream* log = nullptr) {
  if (seeds.empty()) throw ConfigError("ablate needs at least one seed");
  AblationSummary out;
  for (const auto& v : ablation_variants()) {
    double acc = 0.0;
    for (auto seed : seeds) {
      RunConfig c = base;
      c.gapl = v.gapl, c.sqmlfi = v.sqmlfi, c.btff = v.btff, c.mto = v.mto;
      c.seed = seed;
      c.resume.clear();
      c.out = (std::filesystem::path(base.out) / v.name / ("seed" + std::to_string(seed))).string();
      const auto r = train(c);
      const auto s = r.val_scores ? *r.val_scores : r.train_scores;
      out.rows.push_back({v.name, seed, s});
      acc += s.miou;
      if (log) *log << v.name << " seed=" << seed << " miou=" << s.miou << " sek=" << s.sek << "\n";
    }
    out.mean_miou[v.name] = acc / static_cast<double>(seeds.size());
  }
  return out;
}

inline std::string ablation_csv(const AblationSummary& s) {
  std::ostringstream os;
  os << "variant,seed,oa,miou,sek,fscd\n";
  for (const auto& r : s.rows) {
    os << r.variant << "," << r.seed << "," << format_double(r.scores.oa) << "," << format_double(r.scores.miou) << ","
       << format_double(r.scores.sek) << "," << format_double(r.scores.fscd) << "\n";
  }
  return os.str();
}

}  // namespace gscd
