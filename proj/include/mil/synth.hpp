#pragma once

#include <string>
#include <vector>

#include "mil/bag.hpp"
#include "mil/error.hpp"
#include "mil/rng.hpp"
#include "mil/types.hpp"

namespace mil {

struct SynthConfig {
  int class_count = 3;
  int bags_per_class = 50;
  int n_min = 50;
  int n_max = 200;
  int feature_width = 32;
  double witness_rate = 0.2;   // fraction of instances carrying the class signal
  double noise_scale = 0.5;    // std of the shared background Gaussian
  int max_bags_per_patient = 4;
};

/// Generated dataset with generator-side ground truth kept for testing:
/// the orthonormal class signature directions and per-bag witness indices.
struct SynthDataset {
  DatasetManifest manifest;
  std::vector<FeatureBag> bags;
  MatXd signatures;                             // class_count x H, orthonormal rows
  std::vector<std::vector<int>> witness_indices;  // per bag
};

/// Draws per-class Gaussian bags around orthonormal signature directions.
/// Each patient owns 1..max_bags_per_patient bags of a single class.
/// Deterministic for a fixed seed.
inline SynthDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.class_count < 2) throw ValidationError("synth_generate: class_count must be >= 2");
  if (cfg.n_min < 1 || cfg.n_max > 100000 || cfg.n_min > cfg.n_max)
    throw ValidationError("synth_generate: n_range must satisfy 1 <= n_min <= n_max <= 1e5");
  if (cfg.feature_width < cfg.class_count)
    throw ValidationError("synth_generate: feature_width must be >= class_count for orthogonal signatures");
  if (cfg.witness_rate < 0.0 || cfg.witness_rate > 1.0)
    throw ValidationError("synth_generate: witness_rate must be in [0, 1]");
  if (cfg.noise_scale < 0.0) throw ValidationError("synth_generate: noise_scale must be >= 0");
  if (cfg.bags_per_class < 1) throw ValidationError("synth_generate: bags_per_class must be >= 1");

  SynthDataset ds;
  ds.manifest.class_count = cfg.class_count;
  ds.manifest.feature_width = cfg.feature_width;

  Rng rng = Rng::derive(seed, {0x5349474eULL});  // signature stream
  const int h = cfg.feature_width;

  // Orthonormal signature directions via QR of a Gaussian matrix.
  MatXd gauss(h, cfg.class_count);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < cfg.class_count; ++c) gauss(r, c) = rng.normal();
  Eigen::HouseholderQR<MatXd> qr(gauss);
  MatXd q = qr.householderQ() * MatXd::Identity(h, cfg.class_count);
  ds.signatures = q.transpose();

  Rng data_rng = Rng::derive(seed, {0x44415441ULL});  // data stream
  char idbuf[64];
  for (int c = 0; c < cfg.class_count; ++c) {
    int remaining = cfg.bags_per_class;
    int patient = 0;
    int bag_in_class = 0;
    while (remaining > 0) {
      const int take = static_cast<int>(
          std::min<long>(remaining, data_rng.range(1, cfg.max_bags_per_patient)));
      std::snprintf(idbuf, sizeof(idbuf), "c%dp%03d", c, patient);
      const std::string patient_id = idbuf;
      for (int k = 0; k < take; ++k, ++bag_in_class) {
        std::snprintf(idbuf, sizeof(idbuf), "c%db%03d", c, bag_in_class);
        FeatureBag bag;
        bag.bag_id = idbuf;
        bag.patient_id = patient_id;
        bag.label = c;
        const int n = static_cast<int>(data_rng.range(cfg.n_min, cfg.n_max));
        bag.features.resize(n, h);
        for (int i = 0; i < n; ++i)
          for (int d = 0; d < h; ++d)
            bag.features(i, d) = static_cast<float>(cfg.noise_scale * data_rng.normal());
        const int n_witness = static_cast<int>(std::lround(cfg.witness_rate * n));
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        data_rng.shuffle(order);
        std::vector<int> witnesses(order.begin(), order.begin() + n_witness);
        for (int i : witnesses)
          for (int d = 0; d < h; ++d) bag.features(i, d) += static_cast<float>(ds.signatures(c, d));
        ds.manifest.entries.push_back({bag.bag_id, bag.patient_id, bag.label, "bags/" + bag.bag_id + ".milb"});
        ds.bags.push_back(std::move(bag));
        ds.witness_indices.push_back(std::move(witnesses));
      }
      remaining -= take;
      ++patient;
    }
  }
  return ds;
}

/// Writes manifest.json plus bags/ under `dir`.
inline void save_synth_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "bags");
  for (const auto& bag : ds.bags) save_bag(bag, dir / "bags" / (bag.bag_id + ".milb"));
  save_manifest(ds.manifest, dir / "manifest.json");
}

}  // namespace mil
