#pragma once

#include <array>
#include <map>
#include <optional>

#include "nulite/hv.hpp"

namespace nulite {

struct MatchPair {
  int32_t gt_id = 0;
  int32_t pred_id = 0;
  double iou = 0;
};

struct MatchResult {
  std::vector<MatchPair> tp_pairs;
  std::vector<int32_t> fp_ids;  // unmatched predictions
  std::vector<int32_t> fn_ids;  // unmatched ground truth
};

// IoU > 0.5 matching. At that threshold each instance can overlap at most one
// partner above threshold, so the matching is unique without assignment search.
inline MatchResult match_instances(const InstanceMap& gt, const InstanceMap& pred) {
  if (gt.height != pred.height || gt.width != pred.width)
    throw std::invalid_argument("match_instances: shape mismatch");
  std::map<int32_t, int64_t> gt_area, pred_area;
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  for (size_t i = 0; i < gt.ids.size(); ++i) {
    int32_t g = gt.ids[i], p = pred.ids[i];
    if (g > 0) ++gt_area[g];
    if (p > 0) ++pred_area[p];
    if (g > 0 && p > 0) ++inter[{g, p}];
  }
  MatchResult out;
  std::map<int32_t, bool> gt_matched, pred_matched;
  for (auto& [gp, ia] : inter) {
    auto [g, p] = gp;
    double u = double(gt_area[g] + pred_area[p] - ia);
    double iou = u > 0 ? ia / u : 0;
    if (iou > 0.5) {
      out.tp_pairs.push_back({g, p, iou});
      gt_matched[g] = true;
      pred_matched[p] = true;
    }
  }
  for (auto& [g, a] : gt_area)
    if (!gt_matched.count(g)) out.fn_ids.push_back(g);
  for (auto& [p, a] : pred_area)
    if (!pred_matched.count(p)) out.fp_ids.push_back(p);
  return out;
}

struct PqTriple {
  double dq = 0, sq = 0, pq = 0;
};

// DQ = |TP| / (|TP| + 0.5 |FP| + 0.5 |FN|); SQ = mean matched IoU (0 with no
// TPs); PQ = DQ * SQ.
inline PqTriple panoptic_quality(const MatchResult& m) {
  PqTriple t;
  const double tp = double(m.tp_pairs.size());
  const double denom = tp + 0.5 * m.fp_ids.size() + 0.5 * m.fn_ids.size();
  t.dq = denom > 0 ? tp / denom : 0;
  if (!m.tp_pairs.empty()) {
    double s = 0;
    for (const auto& p : m.tp_pairs) s += p.iou;
    t.sq = s / tp;
  }
  t.pq = t.dq * t.sq;
  return t;
}

// Majority class per instance from a per-pixel type map; ties to lower index.
inline std::map<int32_t, int> instance_classes(const InstanceMap& inst,
                                               const std::vector<int>& type_map,
                                               int num_classes) {
  std::map<int32_t, std::vector<int64_t>> votes;
  for (size_t i = 0; i < inst.ids.size(); ++i) {
    int32_t id = inst.ids[i];
    if (id <= 0) continue;
    auto& v = votes[id];
    if (v.empty()) v.assign(size_t(num_classes), 0);
    int c = type_map[i];
    if (c >= 0 && c < num_classes) ++v[size_t(c)];
  }
  std::map<int32_t, int> out;
  for (auto& [id, v] : votes) {
    int best = 1;
    for (int c = 2; c < num_classes; ++c)
      if (v[size_t(c)] > v[size_t(best)]) best = c;
    out[id] = best;
  }
  return out;
}

inline InstanceMap restrict_to_class(const InstanceMap& inst,
                                     const std::map<int32_t, int>& classes, int cls) {
  InstanceMap out(inst.height, inst.width);
  for (size_t i = 0; i < inst.ids.size(); ++i) {
    int32_t id = inst.ids[i];
    if (id <= 0) continue;
    auto it = classes.find(id);
    if (it != classes.end() && it->second == cls) out.ids[i] = id;
  }
  return out;
}

struct MulticlassPq {
  double bpq = 0;
  double mpq = 0;
  std::vector<std::optional<PqTriple>> per_class;  // index 1..C-1; absent-from-both excluded
};

// bPQ treats all nuclei as one class; per-class PQ restricts both maps to
// instances of that class; mPQ averages classes present in gt or pred.
inline MulticlassPq pq_binary_and_multiclass(const InstanceMap& gt_inst,
                                             const std::vector<int>& gt_types,
                                             const InstanceMap& pred_inst,
                                             const std::vector<int>& pred_types,
                                             int num_classes) {
  MulticlassPq out;
  out.bpq = panoptic_quality(match_instances(gt_inst, pred_inst)).pq;
  out.per_class.assign(size_t(num_classes), std::nullopt);
  auto gt_cls = instance_classes(gt_inst, gt_types, num_classes);
  auto pred_cls = instance_classes(pred_inst, pred_types, num_classes);
  double sum = 0;
  int present = 0;
  for (int c = 1; c < num_classes; ++c) {
    bool in_gt = false, in_pred = false;
    for (auto& [id, cl] : gt_cls) in_gt |= (cl == c);
    for (auto& [id, cl] : pred_cls) in_pred |= (cl == c);
    if (!in_gt && !in_pred) continue;
    InstanceMap g = restrict_to_class(gt_inst, gt_cls, c);
    InstanceMap p = restrict_to_class(pred_inst, pred_cls, c);
    PqTriple t = panoptic_quality(match_instances(g, p));
    out.per_class[size_t(c)] = t;
    sum += t.pq;
    ++present;
  }
  out.mpq = present > 0 ? sum / present : 0;
  return out;
}

struct Detection {
  double r = 0, c = 0;
  int class_id = 0;
};

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
};

struct DetectionCounts {
  // paired detections bucketed by (gt class, pred class), plus unmatched
  std::map<std::pair<int, int>, int64_t> pairs;
  std::map<int, int64_t> unmatched_pred;  // by predicted class
  std::map<int, int64_t> unmatched_gt;    // by gt class

  int64_t tp() const {
    int64_t n = 0;
    for (auto& [k, v] : pairs) n += v;
    return n;
  }
  int64_t fp() const {
    int64_t n = 0;
    for (auto& [k, v] : unmatched_pred) n += v;
    return n;
  }
  int64_t fn() const {
    int64_t n = 0;
    for (auto& [k, v] : unmatched_gt) n += v;
    return n;
  }

  void accumulate(const DetectionCounts& o) {
    for (auto& [k, v] : o.pairs) pairs[k] += v;
    for (auto& [k, v] : o.unmatched_pred) unmatched_pred[k] += v;
    for (auto& [k, v] : o.unmatched_gt) unmatched_gt[k] += v;
  }
};

// Greedy nearest-centroid pairing within radius_px; unique on both sides.
// Candidate order: distance, then gt index, then pred index.
inline DetectionCounts match_detections(const std::vector<Detection>& gt,
                                        const std::vector<Detection>& pred,
                                        double radius_px) {
  if (radius_px <= 0) throw std::invalid_argument("detection radius must be > 0");
  struct Cand {
    double d;
    size_t gi, pi;
  };
  std::vector<Cand> cands;
  for (size_t gi = 0; gi < gt.size(); ++gi)
    for (size_t pi = 0; pi < pred.size(); ++pi) {
      double dr = gt[gi].r - pred[pi].r, dc = gt[gi].c - pred[pi].c;
      double d = std::sqrt(dr * dr + dc * dc);
      if (d <= radius_px) cands.push_back({d, gi, pi});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.gi != b.gi) return a.gi < b.gi;
    return a.pi < b.pi;
  });
  std::vector<uint8_t> gt_used(gt.size(), 0), pred_used(pred.size(), 0);
  DetectionCounts out;
  for (const auto& c : cands) {
    if (gt_used[c.gi] || pred_used[c.pi]) continue;
    gt_used[c.gi] = 1;
    pred_used[c.pi] = 1;
    ++out.pairs[{gt[c.gi].class_id, pred[c.pi].class_id}];
  }
  for (size_t gi = 0; gi < gt.size(); ++gi)
    if (!gt_used[gi]) ++out.unmatched_gt[gt[gi].class_id];
  for (size_t pi = 0; pi < pred.size(); ++pi)
    if (!pred_used[pi]) ++out.unmatched_pred[pred[pi].class_id];
  return out;
}

inline ClassScores detection_prf(const DetectionCounts& c) {
  ClassScores s;
  double tp = double(c.tp()), fp = double(c.fp()), fn = double(c.fn());
  s.precision = tp + fp > 0 ? tp / (tp + fp) : 0;
  s.recall = tp + fn > 0 ? tp / (tp + fn) : 0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0;
  return s;
}

// Per-class P/R/F1 with cross-class terms:
//   P_c  = (TP_c + TN_c) / (TP_c + TN_c + 2 FP_c + FP_d)
//   R_c  = (TP_c + TN_c) / (TP_c + TN_c + 2 FN_c + FN_d)
//   F1_c = 2 (TP_c + TN_c) / (2 (TP_c + TN_c) + 2 FP_c + 2 FN_c + FP_d + FN_d)
// where TP_c are (c->c) pairs, TN_c are (d->d) pairs with d != c, FP_c are
// (d->c) pairs, FN_c are (c->d) pairs, and FP_d / FN_d count unmatched
// predictions / ground truth of class c.
inline ClassScores class_scores(const DetectionCounts& cnt, int cls) {
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (auto& [k, v] : cnt.pairs) {
    auto [g, p] = k;
    if (g == cls && p == cls) tp += double(v);
    else if (g == p && g != cls) tn += double(v);
    else if (g != cls && p == cls) fp += double(v);
    else if (g == cls && p != cls) fn += double(v);
  }
  double fpd = 0, fnd = 0;
  if (auto it = cnt.unmatched_pred.find(cls); it != cnt.unmatched_pred.end())
    fpd = double(it->second);
  if (auto it = cnt.unmatched_gt.find(cls); it != cnt.unmatched_gt.end())
    fnd = double(it->second);
  ClassScores s;
  double pden = tp + tn + 2 * fp + fpd;
  double rden = tp + tn + 2 * fn + fnd;
  double fden = 2 * (tp + tn) + 2 * fp + 2 * fn + fpd + fnd;
  s.precision = pden > 0 ? (tp + tn) / pden : 0;
  s.recall = rden > 0 ? (tp + tn) / rden : 0;
  s.f1 = fden > 0 ? 2 * (tp + tn) / fden : 0;
  return s;
}

// One evaluated image.
struct ImageEval {
  int tissue = 0;
  PqTriple binary;  // pooled-side stats are derived from match counts below
  double bpq = 0;
  double mpq = 0;
  std::vector<std::optional<PqTriple>> class_pq;
  int64_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
  DetectionCounts detections;
};

inline ImageEval evaluate_image(const InstanceMap& gt_inst, const std::vector<int>& gt_types,
                                const InstanceMap& pred_inst,
                                const std::vector<int>& pred_types, int num_classes,
                                double radius_px, int tissue = 0) {
  ImageEval ev;
  ev.tissue = tissue;
  MatchResult m = match_instances(gt_inst, pred_inst);
  ev.binary = panoptic_quality(m);
  ev.tp = int64_t(m.tp_pairs.size());
  ev.fp = int64_t(m.fp_ids.size());
  ev.fn = int64_t(m.fn_ids.size());
  for (auto& p : m.tp_pairs) ev.iou_sum += p.iou;
  MulticlassPq mc =
      pq_binary_and_multiclass(gt_inst, gt_types, pred_inst, pred_types, num_classes);
  ev.bpq = mc.bpq;
  ev.mpq = mc.mpq;
  ev.class_pq = mc.per_class;

  auto to_dets = [&](const InstanceMap& inst, const std::vector<int>& types) {
    auto cls = instance_classes(inst, types, num_classes);
    std::map<int32_t, std::array<double, 3>> acc;  // id -> (r sum, c sum, n)
    for (int64_t r = 0; r < inst.height; ++r)
      for (int64_t c = 0; c < inst.width; ++c) {
        int32_t id = inst.at(r, c);
        if (id <= 0) continue;
        auto& a = acc[id];
        a[0] += double(r);
        a[1] += double(c);
        a[2] += 1;
      }
    std::vector<Detection> out;
    for (auto& [id, a] : acc) out.push_back({a[0] / a[2], a[1] / a[2], cls[id]});
    return out;
  };
  ev.detections = match_detections(to_dets(gt_inst, gt_types), to_dets(pred_inst, pred_types),
                                   radius_px);
  return ev;
}

struct TissueRow {
  int tissue = 0;
  int64_t images = 0;
  double bpq = 0, mpq = 0;
};

struct MetricsReport {
  int64_t images = 0;
  // dataset-pooled binary matching stats; pq == dq * sq by construction
  PqTriple binary;
  // per-class PQ averaged over the images where the class is present
  std::vector<std::optional<double>> class_pq_mean;
  double bpq = 0, mpq = 0;  // per-image means
  ClassScores detection;
  std::vector<ClassScores> per_class_scores;  // index by class id
  std::vector<TissueRow> tissues;
  double tissue_bpq_avg = 0, tissue_bpq_std = 0;
  double tissue_mpq_avg = 0, tissue_mpq_std = 0;
};

// Aggregates per-image results: pooled match counts for DQ/SQ/PQ, per-image
// means for bPQ/mPQ, per-tissue means with population std across tissues.
inline MetricsReport aggregate_report(const std::vector<ImageEval>& evals, int num_classes) {
  if (evals.empty()) throw std::invalid_argument("aggregate_report: no images");
  MetricsReport r;
  r.images = int64_t(evals.size());

  int64_t tp = 0, fp = 0, fn = 0;
  double iou = 0;
  DetectionCounts det;
  std::vector<double> cls_sum(size_t(num_classes), 0);
  std::vector<int64_t> cls_n(size_t(num_classes), 0);
  std::map<int, std::pair<double, double>> tissue_acc;  // tissue -> (bpq sum, mpq sum)
  std::map<int, int64_t> tissue_n;
  for (const auto& e : evals) {
    tp += e.tp;
    fp += e.fp;
    fn += e.fn;
    iou += e.iou_sum;
    r.bpq += e.bpq;
    r.mpq += e.mpq;
    det.accumulate(e.detections);
    for (int c = 1; c < num_classes; ++c)
      if (size_t(c) < e.class_pq.size() && e.class_pq[size_t(c)]) {
        cls_sum[size_t(c)] += e.class_pq[size_t(c)]->pq;
        ++cls_n[size_t(c)];
      }
    auto& t = tissue_acc[e.tissue];
    t.first += e.bpq;
    t.second += e.mpq;
    ++tissue_n[e.tissue];
  }
  r.bpq /= double(evals.size());
  r.mpq /= double(evals.size());
  double denom = double(tp) + 0.5 * double(fp) + 0.5 * double(fn);
  r.binary.dq = denom > 0 ? double(tp) / denom : 0;
  r.binary.sq = tp > 0 ? iou / double(tp) : 0;
  r.binary.pq = r.binary.dq * r.binary.sq;
  r.detection = detection_prf(det);
  r.per_class_scores.assign(size_t(num_classes), {});
  for (int c = 1; c < num_classes; ++c) r.per_class_scores[size_t(c)] = class_scores(det, c);
  r.class_pq_mean.assign(size_t(num_classes), std::nullopt);
  for (int c = 1; c < num_classes; ++c)
    if (cls_n[size_t(c)] > 0) r.class_pq_mean[size_t(c)] = cls_sum[size_t(c)] / cls_n[size_t(c)];

  double bsum = 0, msum = 0;
  for (auto& [tissue, acc] : tissue_acc) {
    TissueRow row;
    row.tissue = tissue;
    row.images = tissue_n[tissue];
    row.bpq = acc.first / row.images;
    row.mpq = acc.second / row.images;
    r.tissues.push_back(row);
    bsum += row.bpq;
    msum += row.mpq;
  }
  const double nt = double(r.tissues.size());
  r.tissue_bpq_avg = bsum / nt;
  r.tissue_mpq_avg = msum / nt;
  double bvar = 0, mvar = 0;
  for (auto& row : r.tissues) {
    bvar += (row.bpq - r.tissue_bpq_avg) * (row.bpq - r.tissue_bpq_avg);
    mvar += (row.mpq - r.tissue_mpq_avg) * (row.mpq - r.tissue_mpq_avg);
  }
  r.tissue_bpq_std = std::sqrt(bvar / nt);  // population convention
  r.tissue_mpq_std = std::sqrt(mvar / nt);
  return r;
}

}  // namespace nulite
