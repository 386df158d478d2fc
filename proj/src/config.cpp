#include "boxgen/config.hpp"

#include <fstream>
#include <set>

#include "boxgen/vocab.hpp"

namespace boxgen {

namespace {

using nlohmann::json;

struct ErrorList {
  std::vector<std::string> items;
  void add(const std::string& key, const std::string& what) { items.push_back(key + ": " + what); }
  void raise_if_any() const {
    if (items.empty()) return;
    std::string msg = "config invalid:";
    for (const auto& e : items) msg += "\n  " + e;
    throw ConfigError(msg);
  }
};

template <typename T>
void read_key(const json& j, const char* key, T& out, ErrorList& errs) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    errs.add(key, "wrong type, expected " + std::string(typeid(T).name()));
  }
}

const std::set<std::string> kStageNames = {"D1", "D2", "D3", "U1", "U2", "U3"};

void check_stages(const std::vector<std::string>& stages, const char* key, int n_stages,
                  ErrorList& errs) {
  for (const auto& s : stages) {
    if (!kStageNames.count(s)) {
      errs.add(key, "unknown stage '" + s + "', allowed: D1 D2 D3 U1 U2 U3");
      continue;
    }
    const int depth = s[1] - '0';
    if (depth > n_stages)
      errs.add(key, "stage '" + s + "' deeper than unet_stages=" + std::to_string(n_stages));
  }
}

}  // namespace

json Config::to_json() const {
  json j;
  j["resolution"] = resolution;
  j["n_obj_max"] = n_obj_max;
  j["n_max"] = n_max;
  j["overlap_max"] = overlap_max;
  j["obj_min_frac"] = obj_min_frac;
  j["obj_max_frac"] = obj_max_frac;
  j["n_freqs"] = n_freqs;
  j["d_model"] = d_model;
  j["d_cat"] = d_cat;
  j["d_grounding_hidden"] = d_grounding_hidden;
  j["grounding_concat_mode"] = grounding_concat_mode;
  j["unet_widths"] = unet_widths;
  j["unet_stages"] = unet_stages;
  j["l_txt"] = l_txt;
  j["attn_heads"] = attn_heads;
  j["t_emb_dim"] = t_emb_dim;
  j["groupnorm_groups"] = groupnorm_groups;
  j["diffusion_t"] = diffusion_t;
  j["beta_min"] = beta_min;
  j["beta_max"] = beta_max;
  j["sample_steps"] = sample_steps;
  j["latent_mode"] = latent_mode;
  j["ae_steps"] = ae_steps;
  j["ae_lr"] = ae_lr;
  j["insertion_stages"] = insertion_stages;
  j["attention_variant"] = attention_variant;
  j["perception_enabled"] = perception_enabled;
  j["fpn_tap_stages"] = fpn_tap_stages;
  j["fpn_channels"] = fpn_channels;
  j["d_seq"] = d_seq;
  j["enh_heads"] = enh_heads;
  j["enh_fusion_enabled"] = enh_fusion_enabled;
  j["enh_fusion_residual"] = enh_fusion_residual;
  j["focal_gamma"] = focal_gamma;
  j["focal_alpha"] = focal_alpha;
  j["iou_pos"] = iou_pos;
  j["iou_neg"] = iou_neg;
  j["perception_t_max_frac"] = perception_t_max_frac;
  j["focal_on_regression"] = focal_on_regression;
  j["anchor_base_scale"] = anchor_base_scale;
  j["loss_weight_mode"] = loss_weight_mode;
  j["fixed_alpha"] = fixed_alpha;
  j["fixed_beta"] = fixed_beta;
  j["batch_size"] = batch_size;
  j["base_steps"] = base_steps;
  j["finetune_steps"] = finetune_steps;
  j["lr_base"] = lr_base;
  j["lr_heads"] = lr_heads;
  j["lr_min_frac"] = lr_min_frac;
  j["weight_decay"] = weight_decay;
  j["grad_clip"] = grad_clip;
  j["log_every"] = log_every;
  j["seed"] = seed;
  j["det_steps"] = det_steps;
  j["det_lr"] = det_lr;
  j["det_batch"] = det_batch;
  j["d_feat"] = d_feat;
  j["eval_score_threshold"] = eval_score_threshold;
  j["eval_nms_iou"] = eval_nms_iou;
  j["eval_max_detections"] = eval_max_detections;
  return j;
}

Config config_from_json(const json& j) {
  if (!j.is_object() && !j.is_null()) throw ConfigError("config root must be a JSON object");
  Config c;
  ErrorList errs;

  // unknown-key pass against the full key set
  if (j.is_object()) {
    const json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!known.contains(it.key())) errs.add(it.key(), "unknown key");
  }

  if (j.is_object()) {
    read_key(j, "resolution", c.resolution, errs);
    read_key(j, "n_obj_max", c.n_obj_max, errs);
    read_key(j, "n_max", c.n_max, errs);
    read_key(j, "overlap_max", c.overlap_max, errs);
    read_key(j, "obj_min_frac", c.obj_min_frac, errs);
    read_key(j, "obj_max_frac", c.obj_max_frac, errs);
    read_key(j, "n_freqs", c.n_freqs, errs);
    read_key(j, "d_model", c.d_model, errs);
    read_key(j, "d_cat", c.d_cat, errs);
    read_key(j, "d_grounding_hidden", c.d_grounding_hidden, errs);
    read_key(j, "grounding_concat_mode", c.grounding_concat_mode, errs);
    read_key(j, "unet_widths", c.unet_widths, errs);
    read_key(j, "unet_stages", c.unet_stages, errs);
    read_key(j, "l_txt", c.l_txt, errs);
    read_key(j, "attn_heads", c.attn_heads, errs);
    read_key(j, "t_emb_dim", c.t_emb_dim, errs);
    read_key(j, "groupnorm_groups", c.groupnorm_groups, errs);
    read_key(j, "diffusion_t", c.diffusion_t, errs);
    read_key(j, "beta_min", c.beta_min, errs);
    read_key(j, "beta_max", c.beta_max, errs);
    read_key(j, "sample_steps", c.sample_steps, errs);
    read_key(j, "latent_mode", c.latent_mode, errs);
    read_key(j, "ae_steps", c.ae_steps, errs);
    read_key(j, "ae_lr", c.ae_lr, errs);
    read_key(j, "insertion_stages", c.insertion_stages, errs);
    read_key(j, "attention_variant", c.attention_variant, errs);
    read_key(j, "perception_enabled", c.perception_enabled, errs);
    read_key(j, "fpn_tap_stages", c.fpn_tap_stages, errs);
    read_key(j, "fpn_channels", c.fpn_channels, errs);
    read_key(j, "d_seq", c.d_seq, errs);
    read_key(j, "enh_heads", c.enh_heads, errs);
    read_key(j, "enh_fusion_enabled", c.enh_fusion_enabled, errs);
    read_key(j, "enh_fusion_residual", c.enh_fusion_residual, errs);
    read_key(j, "focal_gamma", c.focal_gamma, errs);
    read_key(j, "focal_alpha", c.focal_alpha, errs);
    read_key(j, "iou_pos", c.iou_pos, errs);
    read_key(j, "iou_neg", c.iou_neg, errs);
    read_key(j, "perception_t_max_frac", c.perception_t_max_frac, errs);
    read_key(j, "focal_on_regression", c.focal_on_regression, errs);
    read_key(j, "anchor_base_scale", c.anchor_base_scale, errs);
    read_key(j, "loss_weight_mode", c.loss_weight_mode, errs);
    read_key(j, "fixed_alpha", c.fixed_alpha, errs);
    read_key(j, "fixed_beta", c.fixed_beta, errs);
    read_key(j, "batch_size", c.batch_size, errs);
    read_key(j, "base_steps", c.base_steps, errs);
    read_key(j, "finetune_steps", c.finetune_steps, errs);
    read_key(j, "lr_base", c.lr_base, errs);
    read_key(j, "lr_heads", c.lr_heads, errs);
    read_key(j, "lr_min_frac", c.lr_min_frac, errs);
    read_key(j, "weight_decay", c.weight_decay, errs);
    read_key(j, "grad_clip", c.grad_clip, errs);
    read_key(j, "log_every", c.log_every, errs);
    read_key(j, "seed", c.seed, errs);
    read_key(j, "det_steps", c.det_steps, errs);
    read_key(j, "det_lr", c.det_lr, errs);
    read_key(j, "det_batch", c.det_batch, errs);
    read_key(j, "d_feat", c.d_feat, errs);
    read_key(j, "eval_score_threshold", c.eval_score_threshold, errs);
    read_key(j, "eval_nms_iou", c.eval_nms_iou, errs);
    read_key(j, "eval_max_detections", c.eval_max_detections, errs);
  }

  // range and cross-field checks, accumulated on top of type errors
  if (c.resolution < 8 || (c.resolution & (c.resolution - 1)) != 0)
    errs.add("resolution", "must be a power of two >= 8");
  if (c.n_obj_max < 1) errs.add("n_obj_max", "must be >= 1");
  if (c.n_max < c.n_obj_max) errs.add("n_max", "must be >= n_obj_max");
  if (c.overlap_max < 0 || c.overlap_max > 1) errs.add("overlap_max", "must lie in [0,1]");
  if (!(c.obj_min_frac > 0 && c.obj_min_frac <= c.obj_max_frac && c.obj_max_frac < 1))
    errs.add("obj_min_frac", "need 0 < obj_min_frac <= obj_max_frac < 1");
  if (c.n_freqs < 1) errs.add("n_freqs", "must be >= 1");
  if (c.grounding_concat_mode != "feature" && c.grounding_concat_mode != "token")
    errs.add("grounding_concat_mode", "must be 'feature' or 'token'");
  if (c.d_cat < 1) errs.add("d_cat", "must be >= 1");
  if (c.grounding_concat_mode == "token" && c.d_cat != c.d_fourier())
    errs.add("d_cat", "token concat mode runs one shared MLP over category and box rows, so d_cat must equal 8*n_freqs");
  if (c.unet_stages < 1 || c.unet_stages > 3) errs.add("unet_stages", "must lie in [1,3]");
  if (static_cast<int>(c.unet_widths.size()) < c.unet_stages)
    errs.add("unet_widths", "needs one width per stage");
  for (int w : c.unet_widths)
    if (w < 4 || w % 4 != 0) errs.add("unet_widths", "widths must be multiples of 4, >= 4");
  if (c.resolution >> c.unet_stages < 1)
    errs.add("unet_stages", "too deep for resolution " + std::to_string(c.resolution));
  if (c.diffusion_t < 1) errs.add("diffusion_t", "must be >= 1");
  if (!(c.beta_min > 0 && c.beta_min <= c.beta_max && c.beta_max < 1))
    errs.add("beta_min", "need 0 < beta_min <= beta_max < 1");
  if (c.latent_mode != "pixel" && c.latent_mode != "conv16")
    errs.add("latent_mode", "must be 'pixel' or 'conv16'");
  else if (c.h_lat() >> c.unet_stages < 1)
    errs.add("latent_mode", "latent grid too small for unet depth");
  if (c.ae_steps < 1) errs.add("ae_steps", "must be >= 1");
  if (!(c.ae_lr > 0)) errs.add("ae_lr", "must be positive");
  if (c.sample_steps < 0 || c.sample_steps > c.diffusion_t)
    errs.add("sample_steps", "must lie in [0, diffusion_t]");
  check_stages(c.insertion_stages, "insertion_stages", c.unet_stages, errs);
  if (c.attention_variant != "grounding" && c.attention_variant != "gate")
    errs.add("attention_variant", "must be 'grounding' or 'gate'");
  check_stages(c.fpn_tap_stages, "fpn_tap_stages", c.unet_stages, errs);
  for (const auto& s : c.fpn_tap_stages)
    if (s[0] == 'U') errs.add("fpn_tap_stages", "taps come from down stages only, got '" + s + "'");
  if (c.fpn_tap_stages.empty()) errs.add("fpn_tap_stages", "need at least one tap stage");
  if (c.d_model % c.attn_heads != 0)
    errs.add("attn_heads", "must divide d_model");
  if (c.d_seq % c.enh_heads != 0) errs.add("enh_heads", "must divide d_seq");
  if (c.focal_gamma < 0) errs.add("focal_gamma", "must be >= 0");
  if (c.focal_alpha <= 0 || c.focal_alpha >= 1) errs.add("focal_alpha", "must lie in (0,1)");
  if (!(c.iou_neg <= c.iou_pos && c.iou_neg >= 0 && c.iou_pos <= 1))
    errs.add("iou_pos", "need 0 <= iou_neg <= iou_pos <= 1");
  if (c.perception_t_max_frac <= 0 || c.perception_t_max_frac > 1)
    errs.add("perception_t_max_frac", "must lie in (0,1]");
  if (c.anchor_base_scale <= 0) errs.add("anchor_base_scale", "must be > 0");
  if (c.loss_weight_mode != "trainable" && c.loss_weight_mode != "fixed")
    errs.add("loss_weight_mode", "must be 'trainable' or 'fixed'");
  if (c.loss_weight_mode == "fixed" && (c.fixed_alpha < 0 || c.fixed_beta < 0))
    errs.add("fixed_alpha", "fixed weights must be >= 0");
  if (c.batch_size < 1) errs.add("batch_size", "must be >= 1");
  if (c.base_steps < 1 || c.finetune_steps < 1) errs.add("base_steps", "step budgets must be >= 1");
  if (c.lr_base <= 0 || c.lr_heads <= 0) errs.add("lr_base", "learning rates must be > 0");
  if (c.d_feat < 2) errs.add("d_feat", "must be >= 2");
  if (c.eval_score_threshold < 0 || c.eval_score_threshold > 1)
    errs.add("eval_score_threshold", "must lie in [0,1]");
  if (c.eval_max_detections < 1) errs.add("eval_max_detections", "must be >= 1");

  errs.raise_if_any();
  return c;
}

void validate_config(const Config& c) { (void)config_from_json(c.to_json()); }

Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  // an empty file means "all defaults"
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return Config{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

uint64_t config_hash(const Config& c) {
  const std::string s = c.to_json().dump();
  return fnv1a64(s.data(), s.size());
}

}  // namespace boxgen
