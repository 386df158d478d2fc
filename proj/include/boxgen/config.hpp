#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "boxgen/core/common.hpp"

namespace boxgen {

// Every knob the pipeline reads, with its default. Normalized form (all keys
// present, validated) is what gets embedded in manifests, checkpoints and
// reports.
struct Config {
  // data synthesis
  int resolution = 32;
  int n_obj_max = 3;          // objects per scene drawn uniformly from [1, this]
  int n_max = 8;              // grounding set capacity
  double overlap_max = 0.3;
  double obj_min_frac = 0.25;  // object box side as fraction of image side
  double obj_max_frac = 0.55;

  // grounding encoder
  int n_freqs = 8;            // fourier embedding: d_fourier = 8 * n_freqs
  int d_model = 64;           // caption/grounding token width
  int d_cat = 64;             // category embedding width
  int d_grounding_hidden = 128;
  std::string grounding_concat_mode = "feature";  // or "token"

  // backbone
  std::vector<int> unet_widths = {32, 64, 128};
  int unet_stages = 3;
  int l_txt = 16;
  int attn_heads = 4;
  int t_emb_dim = 64;
  int groupnorm_groups = 8;
  int diffusion_t = 400;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int sample_steps = 0;  // 0 = full T; otherwise strided subset of this many
  std::string latent_mode = "pixel";  // or "conv16": halved-resolution conv latents
  int ae_steps = 500;                 // conv16 only: autoencoder pretraining steps
  double ae_lr = 1e-3;
  std::vector<std::string> insertion_stages = {"D3", "U1"};
  std::string attention_variant = "grounding";  // or "gate"

  // perception head
  bool perception_enabled = true;
  std::vector<std::string> fpn_tap_stages = {"D2", "D3"};
  int fpn_channels = 32;
  int d_seq = 64;
  int enh_heads = 4;
  bool enh_fusion_enabled = true;
  bool enh_fusion_residual = true;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double iou_pos = 0.5;
  double iou_neg = 0.4;
  double perception_t_max_frac = 0.5;
  bool focal_on_regression = false;  // move the focal factor from the class CE to the box loss
  double anchor_base_scale = 4.0;  // anchor side = stride * this * {1, 1.26, 1.59}

  // loss weighting
  std::string loss_weight_mode = "trainable";  // or "fixed"
  double fixed_alpha = 1.0;
  double fixed_beta = 1.0;

  // training
  int batch_size = 8;
  int base_steps = 4000;
  int finetune_steps = 3000;
  double lr_base = 1e-4;
  double lr_heads = 1e-3;
  double lr_min_frac = 0.05;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int log_every = 50;
  uint64_t seed = 0;

  // detector / evaluation
  int det_steps = 1500;
  double det_lr = 1e-3;
  int det_batch = 8;
  int d_feat = 64;
  double eval_score_threshold = 0.5;
  double eval_nms_iou = 0.5;
  int eval_max_detections = 20;

  int d_fourier() const { return 8 * n_freqs; }
  bool pixel_latents() const { return latent_mode == "pixel"; }
  int c_lat() const { return pixel_latents() ? 3 : 4; }
  int h_lat() const { return pixel_latents() ? resolution : resolution / 2; }
  nlohmann::json to_json() const;
};

// Type-checks every key, fills defaults, rejects unknown keys; throws
// ConfigError whose message aggregates all problems with their key paths.
Config config_from_json(const nlohmann::json& j);

// Empty or missing-keys file yields the fully defaulted config.
Config load_config(const std::string& path);

// Cross-field validation (also run by config_from_json).
void validate_config(const Config& c);

uint64_t config_hash(const Config& c);

}  // namespace boxgen
