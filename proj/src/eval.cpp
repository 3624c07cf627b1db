#include "ssk/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ssk {

MatchResult match(std::span<const Detection> dets, std::span<const Box3D> gts, double iou_thr, IouKind kind) {
  MatchResult r;
  r.tp.assign(dets.size(), 0);
  r.matched_gt.assign(dets.size(), -1);
  r.gt_matched.assign(gts.size(), 0);
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dets[a].score > dets[b].score; });
  for (int d : order) {
    double best = -1.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (r.gt_matched[g] || gts[g].class_id != dets[d].box.class_id) continue;
      const double iou = kind == IouKind::bev ? iou_bev(dets[d].box, gts[g]) : iou_3d(dets[d].box, gts[g]);
      if (iou >= iou_thr && iou > best) {
        best = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      r.tp[d] = 1;
      r.matched_gt[d] = best_g;
      r.gt_matched[best_g] = 1;
    }
  }
  return r;
}

PrCurve pr_curve(std::vector<ScoredHit> hits, int num_gt) {
  if (num_gt < 1) throw std::invalid_argument("pr_curve: no ground truth");
  std::stable_sort(hits.begin(), hits.end(), [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
  PrCurve c;
  int tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i].tp ? 1 : 0;
    c.recall.push_back(static_cast<double>(tp) / num_gt);
    c.precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double sum = 0.0;
  for (int k = 1; k <= 40; ++k) {
    const double r = k / 40.0;
    double best = 0.0;
    for (std::size_t i = 0; i < c.recall.size(); ++i)
      if (c.recall[i] >= r - 1e-12) best = std::max(best, c.precision[i]);
    c.interpolated[k - 1] = best;
    sum += best;
  }
  c.ap = sum / 40.0;
  return c;
}

std::optional<double> ap_r40(std::vector<ScoredHit> hits, int num_gt) {
  if (num_gt < 1) return std::nullopt;
  return pr_curve(std::move(hits), num_gt).ap;
}

void export_pr(const PrCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "recall,precision\n";
  for (std::size_t i = 0; i < curve.recall.size(); ++i) out << curve.recall[i] << ',' << curve.precision[i] << '\n';
}

PrCurve read_pr(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "recall,precision") throw std::runtime_error(path.string() + ": bad header");
  PrCurve c;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    double r = 0, p = 0;
    char comma = 0;
    if (!(ss >> r >> comma >> p) || comma != ',')
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected `recall,precision`");
    c.recall.push_back(r);
    c.precision.push_back(p);
  }
  return c;
}

bool RangeBucket::contains(const Box3D& b) const {
  const double r = b.center.head<2>().norm();
  return r >= min_range && r < max_range;
}

EvalReport evaluate(std::span<const std::vector<Detection>> dets, std::span<const std::vector<Box3D>> gts,
                    const EvalConfig& cfg) {
  if (dets.size() != gts.size()) throw std::invalid_argument("evaluate: scene count mismatch");
  EvalReport report;
  std::vector<double> first_bucket;
  for (std::size_t bi = 0; bi < cfg.buckets.size(); ++bi) {
    const RangeBucket& bucket = cfg.buckets[bi];
    for (int c = 0; c < kNumClasses; ++c) {
      ClassBucketAp e;
      e.class_id = c;
      e.bucket = bucket.name;
      std::vector<ScoredHit> hits;
      for (std::size_t s = 0; s < dets.size(); ++s) {
        std::vector<Detection> d;
        std::vector<Box3D> g;
        for (const auto& x : dets[s])
          if (x.box.class_id == c && bucket.contains(x.box)) d.push_back(x);
        for (const auto& x : gts[s])
          if (x.class_id == c && bucket.contains(x)) g.push_back(x);
        const MatchResult m = match(d, g, cfg.iou_thr[c], cfg.kind);
        for (std::size_t k = 0; k < d.size(); ++k) hits.push_back({d[k].score, m.tp[k] != 0});
        e.num_gt += static_cast<int>(g.size());
        e.num_det += static_cast<int>(d.size());
      }
      if (e.num_gt > 0) {
        e.curve = pr_curve(hits, e.num_gt);
        e.ap = e.curve.ap;
        if (bi == 0) first_bucket.push_back(*e.ap);
      }
      report.entries.push_back(std::move(e));
    }
  }
  if (!first_bucket.empty())
    report.mean_ap = std::accumulate(first_bucket.begin(), first_bucket.end(), 0.0) / first_bucket.size();
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mean_ap"] = mean_ap ? nlohmann::ordered_json(*mean_ap) : nlohmann::ordered_json(nullptr);
  auto& classes = j["classes"];
  for (const auto& e : entries) {
    auto& slot = classes[class_name(e.class_id)][e.bucket];
    slot["ap_r40"] = e.ap ? nlohmann::ordered_json(*e.ap) : nlohmann::ordered_json(nullptr);
    slot["num_gt"] = e.num_gt;
    slot["num_det"] = e.num_det;
  }
  return j.dump(2);
}

}  // namespace ssk
