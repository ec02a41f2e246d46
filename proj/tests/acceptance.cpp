// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset; the working directory receives scratch runs.
// `--expect-fail N` keeps a known failure out of the exit status while still
// reporting it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gscd/gapl.hpp"
#include "gscd/gradcheck.hpp"
#include "gscd/loss_gradcheck.hpp"
#include "gscd/metrics.hpp"
#include "gscd/multitask.hpp"
#include "gscd/synth.hpp"
#include "gscd/train.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace gscd;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

double max_diff(const Tensor& t, const oracle::Mat& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) worst = std::max(worst, std::abs(t[i * m[i].size() + j] - m[i][j]));
  return worst;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome gradcheck_suite() {
  const auto t0 = Clock::now();
  std::size_t checks = 0, failed = 0;
  double worst = 0.0;
  std::string first_failure;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto results = op_family_gradchecks(seed);
    for (auto& r : loss_gradchecks(seed)) results.push_back(std::move(r));
    for (const auto& r : results) {
      ++checks;
      worst = std::max(worst, r.max_rel_error);
      if (!r.passed) {
        ++failed;
        if (first_failure.empty()) first_failure = r.name + " seed " + std::to_string(seed);
      }
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = failed == 0 && t < 120.0;
  o.detail = std::to_string(checks - failed) + "/" + std::to_string(checks) + " checks over 5 seeds, max rel error " +
             sci(worst) + " (< 1e-4), " + fixed(t, 1) + " s (< 120 s)";
  if (!first_failure.empty()) o.detail += ", first failure " + first_failure;
  return o;
}

Outcome rotation_invariants() {
  Rng rng(2024);
  std::size_t conflicting = 0, violations = 0;
  double worst_dot = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 1 + rng.below(64);
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    const auto r = rotate_gradients(a, b);
    if (dot(a, b) >= 0.0) {
      if (r.conflict || r.a != a || r.b != b) ++violations;
    } else {
      ++conflicting;
      const double da = dot(r.a, b), db = dot(r.b, a);
      worst_dot = std::min({worst_dot, da, db});
      if (!r.conflict || da < -1e-12 || db < -1e-12) ++violations;
      if (dot(r.a, r.a) > dot(a, a) || dot(r.b, r.b) > dot(b, b)) ++violations;
    }
    std::vector<double> neg(a);
    for (auto& v : neg) v = -v;
    const auto z = rotate_gradients(a, neg);
    for (std::size_t k = 0; k < n; ++k)
      if (z.a[k] != 0.0 || z.b[k] != 0.0) {
        ++violations;
        break;
      }
  }
  Outcome o;
  o.pass = violations == 0;
  o.detail = "10000 pairs (" + std::to_string(conflicting) + " conflicting), " + std::to_string(violations) +
             " violations, min post-rotation dot " + sci(worst_dot);
  return o;
}

Outcome gapl_oracles() {
  double worst = 0.0;
  bool identical_zero = true;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    Rng rng(seed);
    const std::size_t ns = 2 + rng.below(15), nc = 1 + rng.below(4), d = 1 + rng.below(8);
    const auto F = detail::random_tensor(rng, {ns, d}, -1.0, 1.0, false);
    const auto W = detail::random_tensor(rng, {d, d}, -1.0, 1.0, false);
    const auto C = softmax(detail::random_tensor(rng, {ns, nc}, -2.0, 2.0, false), 1);
    const double sigma = rng.uniform(0.3, 2.0);
    const auto A = build_adjacency(F, sigma);
    worst = std::max(worst, max_diff(A, oracle::adjacency(to_mat(F), sigma, false)));
    const auto G = gcn_layer(F, A, W);
    worst = std::max(worst, max_diff(G, oracle::gcn_layer(to_mat(F), to_mat(A), to_mat(W))));
    worst = std::max(worst, max_diff(compute_prototypes(G, C).prototypes, oracle::prototypes(to_mat(G), to_mat(C))));
    const auto p1 = detail::random_tensor(rng, {nc, d}, -1.0, 1.0, false);
    const auto p2 = detail::random_tensor(rng, {nc, d}, -1.0, 1.0, false);
    worst = std::max(worst, max_diff(affinity(p1, p2), oracle::affinity(to_mat(p1), to_mat(p2))));
    worst = std::max(worst,
                     std::abs(cpa_loss(affinity_triple(p1, p2)).item() - oracle::cpa_loss(to_mat(p1), to_mat(p2))));
    if (cpa_loss(affinity_triple(p1, p1)).item() != 0.0) identical_zero = false;
  }
  // identical temporal feature maps through the whole branch
  Rng rng(99);
  GaplBranch branch(6, 4, {}, rng);
  const auto x = detail::random_tensor(rng, {2, 6, 2, 2}, -1.0, 1.0, false);
  const auto conf = softmax(detail::random_tensor(rng, {8, 4}, -2.0, 2.0, false), 1);
  if (branch.forward(x, x, {conf, conf}).loss.item() != 0.0) identical_zero = false;
  Outcome o;
  o.pass = worst <= 1e-12 && identical_zero;
  o.detail = "200 instances, max deviation " + sci(worst) + " (<= 1e-12), L_cpa on identical inputs " +
             (identical_zero ? "0" : "nonzero");
  return o;
}

Outcome ema_bank() {
  const double beta = 0.9;
  PrototypeBank bank(3, 5, beta);
  Rng rng(4);
  std::vector<double> g0(15), v(15);
  for (auto& x : g0) x = rng.uniform(-2.0, 2.0);
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  std::copy(g0.begin(), g0.end(), bank.global(0).mutable_data().begin());
  const auto local = Tensor::from({3, 5}, v);
  double worst = 0.0;
  for (int n = 1; n <= 50; ++n) {
    bank.ema_update(0, local, {true, true, true});
    const double bn = std::pow(beta, n);
    for (std::size_t j = 0; j < 15; ++j) worst = std::max(worst, std::abs(bank.global(0)[j] - (bn * g0[j] + (1 - bn) * v[j])));
  }
  Outcome o;
  o.pass = worst <= 1e-12;
  o.detail = "50 steps at beta 0.9, max deviation " + sci(worst) + " (<= 1e-12)";
  return o;
}

RunConfig quiet_run(const fs::path& data, const fs::path& out) {
  RunConfig c;
  c.data = data.string();
  c.out = out.string();
  c.eval_every = 0;
  return c;
}

Outcome tiny_overfit(const fs::path& work) {
  SceneSpec spec;
  spec.seed = 5;
  save_dataset(work / "overfit_data", generate(spec, 8));
  auto c = quiet_run(work / "overfit_data", work / "overfit_run");
  c.epochs = 300;
  c.lr = 3e-3;
  c.batch_size = 8;
  c.base_channels = 8;
  const auto t0 = Clock::now();
  const auto r = train(c);
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = r.train_scores.miou >= 0.95 && r.train_scores.oa >= 0.98 && t <= 900.0;
  o.detail = "train mIoU " + fixed(r.train_scores.miou) + " (>= 0.95), OA " + fixed(r.train_scores.oa) +
             " (>= 0.98), final L_ss " + fixed(r.history.back().l_ss) + ", " + fixed(t, 1) + " s (<= 900 s)";
  return o;
}

Outcome ablation_trend(const fs::path& work) {
  SceneSpec spec;
  spec.seed = 100;
  spec.height = spec.width = 32;
  save_dataset(work / "ablation_train", generate(spec, 64));
  save_dataset(work / "ablation_val", generate(spec, 32, 64));
  auto c = quiet_run(work / "ablation_train", work / "ablation_runs");
  c.val_data = (work / "ablation_val").string();
  c.epochs = 40;
  c.lr = 3e-3;
  const auto t0 = Clock::now();
  const auto s = run_ablation(c, {1, 2, 3});
  const double full = s.mean_miou.at("full");
  Outcome o;
  std::ostringstream os;
  os << "val mIoU full " << fixed(full);
  for (const auto& [name, m] : s.mean_miou) {
    if (name == "full") continue;
    os << ", " << name << " " << fixed(m);
    if (full < m - 0.01) o.pass = false;
  }
  os << " (full >= each - 0.01), " << fixed(seconds_since(t0), 1) << " s";
  o.detail = os.str();
  return o;
}

Outcome metrics_oracle() {
  std::size_t count_mismatches = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 500; ++seed) {
    Rng rng(seed);
    const std::size_t nc = 2 + rng.below(5), n = 64;
    std::vector<int> y1, y2, ycd, p1, p2, pcd;
    for (std::size_t i = 0; i < n; ++i) {
      y1.push_back(static_cast<int>(rng.below(nc)));
      y2.push_back(rng.below(3) == 0 ? static_cast<int>(rng.below(nc)) : y1.back());
      ycd.push_back(y1.back() != y2.back());
      p1.push_back(static_cast<int>(rng.below(nc)));
      p2.push_back(static_cast<int>(rng.below(nc)));
      pcd.push_back(static_cast<int>(rng.below(2)));
    }
    ConfusionMatrix cm(nc);
    cm.accumulate(p1, p2, y1, y2, pcd, ycd);
    const auto ref = oracle::confusion(nc, p1, p2, y1, y2, pcd, ycd);
    for (std::size_t i = 0; i <= nc; ++i)
      for (std::size_t j = 0; j <= nc; ++j)
        if (cm.at(i, j) != ref[i][j]) ++count_mismatches;
    const auto s = scores(cm);
    const auto r = oracle::scores(ref);
    worst = std::max({worst, std::abs(s.oa - r.oa), std::abs(s.miou - r.miou), std::abs(s.sek - r.sek),
                      std::abs(s.fscd - r.fscd)});
  }
  Rng rng(7);
  std::vector<int> y1, y2, cd;
  for (int i = 0; i < 64; ++i) {
    y1.push_back(static_cast<int>(rng.below(4)));
    y2.push_back(rng.below(2) ? static_cast<int>(rng.below(4)) : y1.back());
    cd.push_back(y1.back() != y2.back());
  }
  ConfusionMatrix perfect(4);
  perfect.accumulate(y1, y2, y1, y2, cd, cd);
  const auto ps = scores(perfect);
  const bool perfect_ok = ps.oa == 1.0 && ps.miou == 1.0 && ps.fscd == 1.0;
  Outcome o;
  o.pass = count_mismatches == 0 && worst <= 1e-12 && perfect_ok;
  o.detail = "500 random 8x8 maps, " + std::to_string(count_mismatches) + " count mismatches, max score deviation " +
             sci(worst) + " (<= 1e-12), perfect prediction OA/mIoU/F_scd " + (perfect_ok ? "= 1" : "!= 1");
  return o;
}

Outcome determinism(const fs::path& work) {
  SceneSpec spec;
  spec.seed = 11;
  spec.height = spec.width = 32;
  save_dataset(work / "det_data", generate(spec, 8));
  std::vector<std::string> csv, ckpt;
  for (const char* run : {"det_a", "det_b"}) {
    auto c = quiet_run(work / "det_data", work / run);
    c.epochs = 3;
    c.batch_size = 4;
    c.lr = 1e-3;
    c.seed = 42;
    train(c);
    csv.push_back(read_bytes(work / run / "history.csv"));
    ckpt.push_back(read_bytes(work / run / "checkpoint.gckpt"));
  }
  Outcome o;
  o.pass = !csv[0].empty() && !ckpt[0].empty() && csv[0] == csv[1] && ckpt[0] == ckpt[1];
  o.detail = std::string("history.csv ") + (csv[0] == csv[1] ? "identical" : "differs") + " (" +
             std::to_string(csv[0].size()) + " bytes), checkpoint " + (ckpt[0] == ckpt[1] ? "identical" : "differs") +
             " (" + std::to_string(ckpt[0].size()) + " bytes)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, expected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--expect-fail" && i + 1 < argc) {
      expected.insert(std::stoi(argv[++i]));
    } else {
      only.insert(std::stoi(arg));
    }
  }
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradcheck suite", gradcheck_suite},
      {"gradient rotation invariants", rotation_invariants},
      {"GAPL oracles", gapl_oracles},
      {"EMA prototype bank", ema_bank},
      {"tiny overfit", [&] { return tiny_overfit(work); }},
      {"ablation trend", [&] { return ablation_trend(work); }},
      {"metrics oracle", metrics_oracle},
      {"determinism", [&] { return determinism(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass && !expected.count(id)) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail
              << (!o.pass && expected.count(id) ? " [expected failure]" : "") << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
