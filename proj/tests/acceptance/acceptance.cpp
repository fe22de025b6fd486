// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--seeds N] [criterion ...]
//
// Criteria 3-9 share trained models through one cache, so running them
// together costs far less than running them one at a time.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mimi/experiment.hpp"
#include "mimi/format.hpp"
#include "support/gradcheck.hpp"

using namespace mimi;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i], 3);
  return s + "]";
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// --- 1 ---------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  std::string worst_op;
  for (OpKind kind : testing::kAllOps) {
    for (int trial = 0; trial < 100; ++trial) {
      const double e = testing::random_op_trial(kind, rng).max_rel_error;
      if (e > worst) {
        worst = e;
        worst_op = op_name(kind);
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 60.0,
          std::to_string(std::size(testing::kAllOps)) + " ops x 100 trials, max rel error " +
              format_double(worst) + " (" + worst_op + "), " + fmt(secs, 1) + " s"};
}

// --- 2 ---------------------------------------------------------------------

/// tp * n_non + tn * n_mem: balanced accuracy times 2 * n_mem * n_non.
std::uint64_t cut_objective(const std::vector<double>& mem, const std::vector<double>& non,
                            double cut) {
  std::uint64_t tp = 0, tn = 0;
  for (double s : mem) tp += s < cut;
  for (double s : non) tn += !(s < cut);
  return tp * non.size() + tn * mem.size();
}

Outcome threshold_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  int mismatches = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    const std::size_t m = 1 + rng() % 400, n = 1 + rng() % 400;
    // Every third instance draws from a small grid so ties are common.
    const bool coarse = instance % 3 == 0;
    std::normal_distribution<double> normal(0.0, 1.0);
    const double shift = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    auto draw = [&](double offset) {
      const double x = normal(rng) + offset;
      return coarse ? std::round(x * 4.0) / 4.0 : x;
    };
    std::vector<double> mem(m), non(n);
    for (auto& v : mem) v = draw(0.0);
    for (auto& v : non) v = draw(shift);

    std::vector<double> all(mem);
    all.insert(all.end(), non.begin(), non.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::vector<double> cuts{-INFINITY, INFINITY};
    for (std::size_t i = 0; i + 1 < all.size(); ++i) {
      const double mid = all[i] + (all[i + 1] - all[i]) / 2.0;
      cuts.push_back(mid > all[i] ? mid : all[i + 1]);
    }
    std::uint64_t best = 0;
    for (double c : cuts) best = std::max(best, cut_objective(mem, non, c));

    const Threshold t = search_threshold(mem, non);
    const std::uint64_t got = cut_objective(mem, non, t.value);
    const double exact = double(best) / (2.0 * double(m) * double(n));
    if (got != best || t.objective != exact) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 60.0,
          "1000 instances, " + std::to_string(mismatches) + " mismatches, " + fmt(secs, 1) + " s"};
}

// --- 3-9 -------------------------------------------------------------------

const std::vector<double> kFractions{0.2, 0.4, 0.6, 0.8, 1.0};
const std::vector<std::size_t> kDepths{2, 3, 4, 5, 6};

struct SeedRuns {
  PipelineResult base;
  std::vector<double> epoch_asr;
  double ratio_low = 0, ratio_high = 0;
  std::map<std::size_t, double> depth_asr;
  double dropout = 0, weight_decay = 0;
};

/// Welch's one-sided test of mean(members) < mean(nonmembers).
double welch_p(const AttackReport& r) {
  std::vector<double> a, b;
  for (const auto& rec : r.records) (rec.is_member ? a : b).push_back(rec.score);
  auto mean_var = [](const std::vector<double>& x) {
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
    double ss = 0;
    for (double v : x) ss += (v - mu) * (v - mu);
    return std::pair{mu, ss / double(x.size() - 1)};
  };
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double sa = va / double(a.size()), sb = vb / double(b.size());
  const double t = (mb - ma) / std::sqrt(sa + sb);
  const double df = (sa + sb) * (sa + sb) /
                    (sa * sa / double(a.size() - 1) + sb * sb / double(b.size() - 1));
  return boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return x[i] < x[j]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * double(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

class Experiments {
 public:
  Experiments(std::size_t seeds, std::set<int> wanted, ModelCache* cache)
      : seeds_(seeds), wanted_(std::move(wanted)), cache_(cache) {}

  bool want(int c) const { return wanted_.count(c) > 0; }

  const std::vector<SeedRuns>& runs() {
    if (runs_.empty()) {
      for (std::size_t s = 0; s < seeds_; ++s) runs_.push_back(run_seed(s));
    }
    return runs_;
  }

 private:
  ExperimentConfig base_config(std::uint64_t seed) const {
    ExperimentConfig c;
    c.seed = seed;
    return c;
  }

  double asr(ExperimentConfig c) {
    const auto t0 = Clock::now();
    RunContext ctx;
    ctx.cache = cache_;
    const double a = run_pipeline(c, ctx).report.asr;
    std::cerr << "    asr " << fmt(a) << " (" << fmt(seconds_since(t0), 0) << " s)\n";
    return a;
  }

  SeedRuns run_seed(std::uint64_t seed) {
    const auto t0 = Clock::now();
    std::cerr << "seed " << seed << '\n';
    SeedRuns r;
    RunContext ctx;
    ctx.cache = cache_;

    ExperimentConfig base = base_config(seed);
    if (want(6)) {
      // One target training run with checkpoints at every fraction.
      ExperimentConfig grid = base;
      grid.grid.epoch_fraction = kFractions;
      std::cerr << "  epoch fractions\n";
      const GridResult g = run_grid(grid, ctx);
      for (const auto& cell : g.cells) {
        if (!cell.ok) throw std::runtime_error("epoch grid cell failed: " + cell.error);
        r.epoch_asr.push_back(cell.result.report.asr);
      }
      std::cerr << "    asr " << list(r.epoch_asr) << '\n';
    }
    if (want(3) || want(4) || want(5) || want(8) || want(9)) {
      ExperimentConfig c = base;
      if (want(5)) c.baselines = {"A", "B", "C", "D"};
      std::cerr << "  base pipeline\n";
      r.base = run_pipeline(c, ctx);
      std::cerr << "    asr " << fmt(r.base.report.asr);
      for (const auto& b : r.base.baselines) std::cerr << "  " << b.method << " " << fmt(b.asr);
      std::cerr << '\n';
    }
    if (want(7)) {
      for (double ratio : {0.1, 0.9}) {
        ExperimentConfig c = base;
        c.target_model.mask_ratio = ratio;
        std::cerr << "  mask ratio " << ratio << '\n';
        (ratio < 0.5 ? r.ratio_low : r.ratio_high) = asr(c);
      }
    }
    if (want(8)) {
      for (std::size_t d : kDepths) {
        if (d == base.target_model.decoder_layers) {
          r.depth_asr[d] = r.base.report.asr;
          continue;
        }
        ExperimentConfig c = base;
        apply_setting(c, "shadow.model.decoder_layers", std::to_string(d));
        std::cerr << "  shadow decoder depth " << d << '\n';
        r.depth_asr[d] = asr(c);
      }
    }
    if (want(9)) {
      ExperimentConfig drop = base;
      drop.target_train.dropout_rate = 0.3;
      std::cerr << "  dropout 0.3\n";
      r.dropout = asr(drop);
      ExperimentConfig wd = base;
      wd.target_train.weight_decay = 1e-4;
      std::cerr << "  weight decay 1e-4\n";
      r.weight_decay = asr(wd);
    }
    std::cerr << "seed " << seed << " done in " << fmt(seconds_since(t0), 0) << " s\n";
    return r;
  }

  std::size_t seeds_;
  std::set<int> wanted_;
  ModelCache* cache_;
  std::vector<SeedRuns> runs_;
};

Outcome separation(const std::vector<SeedRuns>& runs) {
  std::vector<double> ps;
  int ok = 0;
  for (const auto& r : runs) {
    ps.push_back(welch_p(r.base.report));
    ok += r.base.report.member_stats.mean < r.base.report.nonmember_stats.mean && ps.back() < 0.01;
  }
  std::string detail = "Welch one-sided p per seed:";
  for (double p : ps) detail += " " + format_double(p);
  const int need = int(runs.size()) - 1;
  return {ok >= need, detail + "; " + std::to_string(ok) + "/" + std::to_string(runs.size()) +
                          " seeds with p < 0.01 (need " + std::to_string(need) + ")"};
}

Outcome effectiveness(const std::vector<SeedRuns>& runs) {
  std::vector<double> a;
  for (const auto& r : runs) a.push_back(r.base.report.asr);
  const double m = median(a);
  return {m > 0.60, "ASR per seed " + list(a) + ", median " + fmt(m) + " (need > 0.60)"};
}

Outcome baseline_order(const std::vector<SeedRuns>& runs) {
  std::vector<double> ours;
  std::map<std::string, std::vector<double>> by;
  for (const auto& r : runs) {
    ours.push_back(r.base.report.asr);
    for (const auto& b : r.base.baselines) by[b.method].push_back(b.asr);
  }
  const double mo = median(ours);
  bool pass = true;
  std::string detail = "median ours " + fmt(mo);
  for (const auto& [method, v] : by) {
    const double mb = median(v);
    detail += ", " + method + " " + fmt(mb);
    pass = pass && mo >= mb;
    if (method == "C" || method == "D") pass = pass && std::abs(mb - 0.5) <= 0.08;
  }
  return {pass && by.size() == 4, detail + " (ours >= all; C, D within 0.5 +/- 0.08)"};
}

Outcome epoch_trend(const std::vector<SeedRuns>& runs) {
  std::vector<double> rho;
  for (const auto& r : runs) rho.push_back(spearman(kFractions, r.epoch_asr));
  const double m = median(rho);
  return {m > 0.0, "Spearman per seed " + list(rho) + ", median " + fmt(m) + " (need > 0)"};
}

Outcome mask_ratio_trend(const std::vector<SeedRuns>& runs) {
  std::vector<double> lo, hi;
  for (const auto& r : runs) {
    lo.push_back(r.ratio_low);
    hi.push_back(r.ratio_high);
  }
  const double ml = median(lo), mh = median(hi);
  return {mh > ml, "median ASR ratio 0.1 " + fmt(ml) + " " + list(lo) + ", ratio 0.9 " + fmt(mh) +
                       " " + list(hi)};
}

Outcome depth_relaxation(const std::vector<SeedRuns>& runs) {
  std::map<std::size_t, double> med;
  std::string detail = "median ASR by shadow decoder depth:";
  for (std::size_t d : kDepths) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.depth_asr.at(d));
    med[d] = median(v);
    detail += " " + std::to_string(d) + "=" + fmt(med[d]);
  }
  bool pass = true;
  for (std::size_t d : kDepths) {
    if (d == 4) continue;
    pass = pass && med[4] >= med[d] && med[d] > 0.55;
  }
  return {pass, detail + " (depth 4 maximal, others > 0.55)"};
}

Outcome defenses(const std::vector<SeedRuns>& runs) {
  std::vector<double> base, drop, wd;
  for (const auto& r : runs) {
    base.push_back(r.base.report.asr);
    drop.push_back(r.dropout);
    wd.push_back(r.weight_decay);
  }
  const double mb = median(base), md = median(drop), mw = median(wd);
  const bool pass = mb - md >= 0.03 && std::abs(mw - mb) < 0.03;
  return {pass, "median ASR none " + fmt(mb) + ", dropout 0.3 " + fmt(md) + " (drop " +
                    fmt(mb - md) + ", need >= 0.03), weight decay 1e-4 " + fmt(mw) + " (change " +
                    fmt(mw - mb) + ", need |.| < 0.03)"};
}

// --- 10 --------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Runs the default pipeline twice from scratch. The second run's models are
/// left in `cache` for the other criteria.
Outcome determinism(ModelCache* cache) {
  const fs::path root = fs::temp_directory_path() / "mimi-acceptance-determinism";
  fs::remove_all(root);
  ExperimentConfig c;
  c.seed = 0;
  // Keeps the epoch checkpoints so the epoch-trend runs can reuse this target.
  c.snapshot_fractions = kFractions;
  ModelCache first;
  RunContext a{&first, nullptr, root};
  RunContext b{cache, nullptr, root};
  std::cerr << "determinism: two default pipelines\n";
  const PipelineResult ra = run_pipeline(c, a);
  const PipelineResult rb = run_pipeline(c, b);
  std::vector<std::string> differing;
  for (const char* f : {"report.txt", "config.txt", "split.txt", "shadow_scores.csv",
                        "target_scores.csv", "target.model", "shadow.model", "simulated.model"}) {
    if (!fs::exists(ra.run_dir / f) || slurp(ra.run_dir / f) != slurp(rb.run_dir / f)) {
      differing.push_back(f);
    }
  }
  fs::remove_all(root);
  std::string detail = differing.empty() ? "report.txt, scores and checkpoints byte-identical"
                                         : "differing files:";
  for (const auto& f : differing) detail += " " + f;
  return {differing.empty(), detail + " (ASR " + fmt(ra.report.asr) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t seeds = 5;
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--seeds" && i + 1 < argc) {
      seeds = std::stoul(argv[++i]);
    } else {
      wanted.insert(std::stoi(arg));
    }
  }
  if (wanted.empty()) wanted = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  const auto t0 = Clock::now();
  ModelCache cache;
  std::map<int, Outcome> results;
  if (wanted.count(1)) results[1] = gradient_check();
  if (wanted.count(2)) results[2] = threshold_oracle();
  if (wanted.count(10)) results[10] = determinism(&cache);

  Experiments ex(seeds, wanted, &cache);
  const std::map<int, Outcome (*)(const std::vector<SeedRuns>&)> statistical{
      {3, separation},      {4, effectiveness},    {5, baseline_order}, {6, epoch_trend},
      {7, mask_ratio_trend}, {8, depth_relaxation}, {9, defenses}};
  for (const auto& [id, check] : statistical) {
    if (wanted.count(id)) results[id] = check(ex.runs());
  }

  int failed = 0;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
              << '\n';
    failed += !o.pass;
  }
  std::cout << results.size() - std::size_t(failed) << "/" << results.size() << " criteria passed in "
            << fmt(seconds_since(t0), 0) << " s\n";
  return failed == 0 ? 0 : 1;
}
