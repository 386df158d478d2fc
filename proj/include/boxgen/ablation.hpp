#pragma once

#include <string>
#include <vector>

#include "boxgen/training.hpp"

namespace boxgen {

// Seed bases keeping the data, sampling and noise streams apart. Shared with
// the command-line tool so a hand-generated split can be reused by a campaign.
inline constexpr uint64_t kTrainSeed0 = 1000;
inline constexpr uint64_t kValSeed0 = 1000000;
inline constexpr uint64_t kSampleSeed0 = 424242;

// One row of a campaign: which modules to instantiate and which knobs depart
// from the campaign config.
struct VariantSpec {
  std::string name;
  ModuleSet mods;
  bool enh = true;
  bool baseline = false;  // score the shared base model, no fine-tune
  std::vector<std::string> insertion_stages;  // empty: keep the campaign value
  std::string loss_mode;                      // empty: keep the campaign value
  double fixed_alpha = 0, fixed_beta = 0;     // used when loss_mode == "fixed"
};

// The fixed variant grids. Campaign must be one of "components", "insertion",
// "loss_weights".
std::vector<VariantSpec> campaign_variants(const std::string& campaign);

// The campaign config specialized to one variant.
Config variant_config(const Config& campaign_cfg, const VariantSpec& v);

struct SeedScore {
  uint64_t seed_offset = 0;
  double iou = 0, map50 = 0, fid = 0;
};

struct VariantResult {
  std::string name;
  std::vector<SeedScore> per_seed;
  double mean_iou = 0, mean_map50 = 0, mean_fid = 0;
};

struct AblationOptions {
  int n_seeds = 3;
  int finetune_steps = 0;  // 0: the config's finetune_steps
  int n_train = 512;
  int n_val = 200;
  double budget_hours = 6.0;
};

struct AblationReport {
  std::string campaign;
  bool incomplete = false;
  double detector_map50 = 0;
  double detector_mean_iou = 0;
  std::vector<VariantResult> variants;
  nlohmann::json comparisons;  // campaign-specific directional checks

  nlohmann::json to_json() const;
  std::string table() const;  // aligned text rendering
};

// Runs (or resumes) one campaign end to end: shared datasets, shared base
// checkpoint, shared detector, then every variant at every seed under the
// same budget. Finished runs found under out_dir are reused when their
// config hash and budget match. Exceeding the wall-clock budget stops the
// campaign and flags the report incomplete.
AblationReport run_ablation(const std::string& campaign, const Config& c,
                            const std::string& out_dir, const AblationOptions& opt = {});

}  // namespace boxgen
