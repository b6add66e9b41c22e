#include "prf/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace prf {

Tensor triplet_loss(const Tensor& fa, const Tensor& fp, const Tensor& fn,
                    double margin) {
  if (fa.numel() != fp.numel() || fa.numel() != fn.numel())
    throw DimensionError("triplet_loss: descriptor lengths differ");
  Tensor dp = sqrt(sum(square(sub(fa, fp))));
  Tensor dn = sqrt(sum(square(sub(fa, fn))));
  return relu(add(sub(dp, dn), Tensor::scalar(margin)));
}

namespace {

double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

double geo_dist(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) +
                   (a[1] - b[1]) * (a[1] - b[1]) +
                   (a[2] - b[2]) * (a[2] - b[2]));
}

}  // namespace

TripletBatch mine_triplets(const std::vector<DescriptorData>& descriptors,
                           double rho, double rho_neg,
                           const std::vector<std::size_t>& anchors) {
  if (rho_neg < rho)
    throw ContractError("mine_triplets: rho_neg must be >= rho");
  TripletBatch out;
  out.rho = rho;
  out.rho_neg = rho_neg;
  for (std::size_t a : anchors) {
    if (a >= descriptors.size())
      throw ContractError("mine_triplets: anchor index out of range");
    std::size_t best_pos = descriptors.size();
    std::size_t best_neg = descriptors.size();
    double worst_pos_dist = -1.0;   // hardest positive: max descriptor dist
    double best_neg_dist = 1e300;   // hardest negative: min descriptor dist
    for (std::size_t j = 0; j < descriptors.size(); ++j) {
      if (j == a) continue;
      const double g = geo_dist(descriptors[a].position,
                                descriptors[j].position);
      if (g <= rho) {
        const double d = l2(descriptors[a].f, descriptors[j].f);
        if (d > worst_pos_dist) {
          worst_pos_dist = d;
          best_pos = j;
        }
      } else if (g > rho_neg) {
        const double d = l2(descriptors[a].f, descriptors[j].f);
        if (d < best_neg_dist) {
          best_neg_dist = d;
          best_neg = j;
        }
      }
    }
    if (best_pos == descriptors.size() || best_neg == descriptors.size()) {
      ++out.skipped_anchors;
      continue;
    }
    out.items.push_back({a, best_pos, best_neg});
  }
  // radii respected by construction; re-verify per batch
  for (const auto& it : out.items) {
    if (geo_dist(descriptors[it.anchor].position,
                 descriptors[it.positive].position) > rho ||
        geo_dist(descriptors[it.anchor].position,
                 descriptors[it.negative].position) <= rho_neg)
      throw Error("mine_triplets: radius invariant violated");
  }
  return out;
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void Adam::step(double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& t = params_[pi].second;
    if (!t.has_grad()) t.zero_grad();
    const auto& g = t.grad();
    auto& data = t.raw_data();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g[i] * grad_scale + cfg_.weight_decay * data[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

namespace {

SceneFrame augment_frame(const SceneFrame& frame, const TrainConfig& cfg,
                         bool allow_flip, Rng& rng) {
  SceneFrame out = frame;
  if (cfg.aug_flip && allow_flip && rng.uniform() < 0.5) {
    for (std::size_t r = 0; r < out.h; ++r)
      std::reverse(out.image.begin() + static_cast<long>(r * out.w),
                   out.image.begin() + static_cast<long>((r + 1) * out.w));
  }
  if (cfg.aug_jitter) {
    for (auto& p : out.points) {
      p[0] += rng.normal(0.0, cfg.jitter_sigma);
      p[1] += rng.normal(0.0, cfg.jitter_sigma);
      p[2] += rng.normal(0.0, cfg.jitter_sigma);
    }
  }
  return out;
}

std::string divergence_dump(const Model& model, int epoch, std::size_t batch,
                            double loss) {
  std::ostringstream os;
  os << "training diverged: epoch " << epoch << " batch " << batch
     << " loss " << loss << "; parameter norms:";
  for (const auto& [name, t] : model.parameters()) {
    double norm = 0;
    for (double v : t.data()) norm += v * v;
    os << " " << name << "=" << std::sqrt(norm);
  }
  return os.str();
}

}  // namespace

TrainResult train(Model& model, const std::vector<SceneFrame>& frames,
                  const TrainConfig& cfg) {
  if (frames.size() < 2)
    throw ContractError("train: need at least two frames");
  // image flips break pixel-point correspondence, so they are applied only to
  // the calibration-free variant
  const bool allow_flip = model.config().variant == Variant::PRFusion;

  Adam opt(model.parameters(), cfg.adam);
  Rng root(cfg.seed);
  TrainResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // frozen snapshot for mining
    std::vector<DescriptorData> snapshot;
    snapshot.reserve(frames.size());
    for (const auto& f : frames) snapshot.push_back(model.embed(f));

    std::vector<std::size_t> anchors(frames.size());
    std::iota(anchors.begin(), anchors.end(), 0);
    Rng shuffle_rng = root.fork(0x5000 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = anchors.size() - 1; i > 0; --i)
      std::swap(anchors[i],
                anchors[shuffle_rng.next_u64() % (i + 1)]);

    double loss_sum = 0;
    std::size_t loss_count = 0;
    std::size_t skipped = 0;
    for (std::size_t start = 0; start < anchors.size(); start += cfg.batch) {
      const std::size_t end = std::min(start + cfg.batch, anchors.size());
      std::vector<std::size_t> batch_anchors(anchors.begin() + start,
                                             anchors.begin() + end);
      TripletBatch batch =
          mine_triplets(snapshot, cfg.rho, cfg.rho_neg, batch_anchors);
      skipped += batch.skipped_anchors;
      if (batch.items.empty()) continue;

      opt.zero_grad();
      double batch_loss = 0;
      for (std::size_t bi = 0; bi < batch.items.size(); ++bi) {
        const auto& item = batch.items[bi];
        Rng aug_rng = root.fork((static_cast<std::uint64_t>(epoch) << 32) ^
                                (start + bi));
        SceneFrame fa = augment_frame(frames[item.anchor], cfg, allow_flip,
                                      aug_rng);
        SceneFrame fp = augment_frame(frames[item.positive], cfg, allow_flip,
                                      aug_rng);
        SceneFrame fn = augment_frame(frames[item.negative], cfg, allow_flip,
                                      aug_rng);
        Tensor loss = triplet_loss(model.forward_graph(fa),
                                   model.forward_graph(fp),
                                   model.forward_graph(fn), cfg.margin);
        const double lv = loss.value();
        if (!std::isfinite(lv))
          throw DivergenceError(
              divergence_dump(model, epoch, start / cfg.batch, lv));
        batch_loss += lv;
        backward(loss);
      }
      opt.step(1.0 / static_cast<double>(batch.items.size()));
      loss_sum += batch_loss;
      loss_count += batch.items.size();
    }
    EpochStat stat;
    stat.epoch = epoch + 1;
    stat.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count)
                                : 0.0;
    stat.skipped_anchors = skipped;
    result.trace.push_back(stat);
  }
  return result;
}

void write_loss_trace(const std::string& path, const TrainResult& result,
                      const std::string& trailer) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.precision(17);
  os << "epoch,mean_loss,skipped_anchors\n";
  for (const auto& s : result.trace)
    os << s.epoch << "," << s.mean_loss << "," << s.skipped_anchors << "\n";
  if (!trailer.empty()) os << trailer << "\n";
}

}  // namespace prf
