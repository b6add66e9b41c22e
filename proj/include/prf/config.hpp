#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prf/model.hpp"
#include "prf/synth.hpp"
#include "prf/training.hpp"

namespace prf {

// Flat key=value run configuration covering every design-decision knob.
// Unknown keys are rejected; the fully resolved form is logged per run.
struct RunConfig {
  ModelConfig model;

  // training
  int epochs = 30;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double margin = 0.2;
  double rho = 25.0;
  double rho_neg = 25.0;
  bool aug_flip = true;
  bool aug_jitter = true;
  double jitter_sigma = 0.05;

  // evaluation
  double tau = 25.0;
  std::size_t k_max = 25;

  // synthetic world
  std::size_t n_places = 100;
  std::size_t revisits = 2;
  std::size_t points_per_frame = 512;
  std::size_t img_h = 64, img_w = 96;
  double place_spacing = 60.0;
  double revisit_jitter = 3.0;

  // perturbation grids
  std::vector<double> alphas{0.0, 0.05, 0.1, 0.2};
  std::vector<double> rot_errors_deg{0.0, 0.5, 1.0, 2.0, 5.0};
  std::vector<double> trans_errors{0.0, 0.05, 0.1, 0.2, 0.5};

  // paths (flags win over config values)
  std::string dataset_dir;
  std::string checkpoint;
  std::string control_checkpoint;
  std::string db_file;
  std::string queries_file;
  std::string out;

  void apply(const std::string& key, const std::string& value);
  static RunConfig from_file(const std::string& path);

  std::string serialize() const;      // fully resolved key=value text
  std::uint64_t hash() const;         // FNV-1a over serialize()
  std::string hash_comment() const;   // "# config_hash=<hex>"

  TrainConfig train_config() const;
  WorldConfig world_config() const;
  SweepConfig sweep_config() const;
};

std::uint64_t fnv1a(const std::string& text);

}  // namespace prf
