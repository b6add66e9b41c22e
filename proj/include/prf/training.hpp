#pragma once

#include <string>
#include <vector>

#include "prf/model.hpp"
#include "prf/tensor.hpp"

namespace prf {

// ell = max(||fa - fp|| - ||fa - fn|| + m, 0); subgradient 0 at the corner.
Tensor triplet_loss(const Tensor& fa, const Tensor& fp, const Tensor& fn,
                    double margin);

struct TripletBatch {
  struct Item {
    std::size_t anchor, positive, negative;
  };
  std::vector<Item> items;
  std::size_t skipped_anchors = 0;
  double rho = 25.0, rho_neg = 25.0;
};

// Batch-hard mining: per anchor, the positive (within rho) with the largest
// descriptor distance and the negative (beyond rho_neg) with the smallest.
// Anchors lacking either are skipped and counted.
TripletBatch mine_triplets(const std::vector<DescriptorData>& descriptors,
                           double rho, double rho_neg,
                           const std::vector<std::size_t>& anchors);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// First/second-moment adaptive optimizer over a parameter registry.
// weight_decay enters the gradient (g + wd * theta), torch-style.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg);
  // Applies one update using each parameter's accumulated gradient scaled by
  // grad_scale, then leaves gradients untouched (caller zeroes them).
  void step(double grad_scale = 1.0);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  int epochs = 30;
  std::size_t batch = 32;
  AdamConfig adam;
  double margin = 0.2;
  double rho = 25.0;
  double rho_neg = 25.0;
  bool aug_flip = true;
  bool aug_jitter = true;
  double jitter_sigma = 0.05;
  std::uint64_t seed = 1;
};

struct EpochStat {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t skipped_anchors = 0;
};

struct TrainResult {
  std::vector<EpochStat> trace;
};

// Epoch loop: embed-all snapshot, batch-hard mining, accumulate triplet
// gradients per batch, Adam step. Deterministic given (config, seed).
// Throws DivergenceError with a diagnostic dump if the loss goes non-finite.
TrainResult train(Model& model, const std::vector<SceneFrame>& frames,
                  const TrainConfig& cfg);

// CSV "epoch,mean_loss,skipped_anchors" plus an optional trailing comment.
void write_loss_trace(const std::string& path, const TrainResult& result,
                      const std::string& trailer);

}  // namespace prf
