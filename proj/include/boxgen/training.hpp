#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "boxgen/autoencoder.hpp"
#include "boxgen/core/optim.hpp"
#include "boxgen/core/serialize.hpp"
#include "boxgen/data_synth.hpp"
#include "boxgen/denoiser.hpp"
#include "boxgen/eval.hpp"
#include "boxgen/perception.hpp"

namespace boxgen {

// A whole split held in memory; at desk resolutions even thousands of scenes
// are a few megabytes.
struct Dataset {
  std::vector<SceneSpec> scenes;
  std::vector<Buffer<float>> images;  // each [3,H,W] in [-1,1]

  size_t size() const { return scenes.size(); }
  static Dataset load(const DatasetManifest& m);
};

// Which optional module groups a fine-tuned model carries. poi: gated
// grounding attention inside the U-Net. pog: perception head plus the
// loss-weighting pair.
struct ModuleSet {
  bool poi = true;
  bool pog = true;
};

inline nlohmann::json moduleset_to_json(const ModuleSet& m) {
  return {{"poi", m.poi}, {"pog", m.pog}};
}

inline ModuleSet moduleset_from_json(const nlohmann::json& j) {
  ModuleSet m;
  m.poi = j.value("poi", true);
  m.pog = j.value("pog", true);
  return m;
}

// Append-only JSONL metrics writer, one object per line.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) : path_(path), f_(path) {
    if (!f_) throw RuntimeFailure("cannot open metrics log: " + path);
  }
  void log(const nlohmann::json& j) {
    f_ << j.dump() << "\n";
    f_.flush();
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream f_;
};

// The denoiser plus whatever conditioning and supervision modules the phase
// calls for, all sharing one parameter store. Construction paths create
// parameters in a fixed order so checkpoints round-trip by name.
template <typename S>
struct GenerationModel {
  Config cfg;
  ModuleSet mods{false, false};
  NoiseSchedule sched;
  ParamStore<S> params;
  Denoiser<S> den;
  AutoEncoder<S> ae;            // meaningful only in conv latent mode
  GroundingEncoder<S> grounding;  // meaningful only with mods.poi
  PerceptionHead<S> head;         // meaningful only with mods.pog
  LossWeights<S> weights;         // meaningful only with mods.pog

  // Fresh caption-only model, the to-be-frozen pretraining target.
  static GenerationModel build_base(const Config& c, Rng& rng) {
    GenerationModel m;
    m.cfg = c;
    m.sched = make_schedule(c.diffusion_t, c.beta_min, c.beta_max);
    if (!c.pixel_latents()) m.ae = AutoEncoder<S>::build(m.params, c, rng);
    m.den = Denoiser<S>::build(m.params, c, rng, false);
    return m;
  }

  // Base weights from the checkpoint, then the requested grounding and
  // perception modules on top. The base creation order mirrors build_base so
  // the load sees exactly the tensors it expects.
  static GenerationModel build_finetune(const Config& c, const std::string& base_ckpt, Rng& rng,
                                        ModuleSet mods) {
    const CheckpointMeta meta = read_checkpoint_meta(base_ckpt);
    if (meta.phase != "base")
      throw ValidationError("fine-tuning starts from a base checkpoint, got phase '" +
                            meta.phase + "'");
    require_same_backbone(config_from_json(meta.config), c);
    GenerationModel m = build_base(c, rng);
    load_checkpoint(base_ckpt, m.params);
    m.add_finetune_modules(rng, mods);
    m.set_finetune_trainable();
    return m;
  }

  // Reconstructs any phase from its checkpoint; the embedded config is
  // authoritative for architecture.
  static GenerationModel load(const std::string& ckpt_path) {
    const CheckpointMeta meta = read_checkpoint_meta(ckpt_path);
    const Config c = config_from_json(meta.config);
    Rng rng(0);  // values are overwritten by the load
    GenerationModel m = build_base(c, rng);
    if (meta.phase == "spatiallock")
      m.add_finetune_modules(rng,
                             moduleset_from_json(meta.extra.value("modules", nlohmann::json::object())));
    else if (meta.phase != "base")
      throw ValidationError("not a generation checkpoint (phase '" + meta.phase + "'): " +
                            ckpt_path);
    load_checkpoint(ckpt_path, m.params);
    if (meta.phase == "spatiallock") m.set_finetune_trainable();
    return m;
  }

  void save(const std::string& path, const std::string& phase, nlohmann::json extra) const {
    extra["modules"] = moduleset_to_json(mods);
    save_checkpoint(path, params, CheckpointMeta{phase, cfg.to_json(), std::move(extra)});
  }

  // Caption embeddings [B, l_txt, d_model].
  Var<S> captions(const std::vector<const SceneSpec*>& batch) const {
    std::vector<std::vector<int>> ids;
    ids.reserve(batch.size());
    for (const SceneSpec* s : batch) ids.push_back(vocab::tokenize_caption(s->caption, cfg.l_txt));
    return den.caption.forward(ids);
  }

  GroundingBatch<S> ground(const std::vector<const SceneSpec*>& batch) const {
    if (!mods.poi) throw StateError("model has no grounding encoder");
    std::vector<std::vector<ObjectSpec>> scenes;
    scenes.reserve(batch.size());
    for (const SceneSpec* s : batch) scenes.push_back(s->objects);
    return grounding.encode_batch(scenes);
  }

  // Clean latents for a stack of images: the pixels themselves, or the
  // frozen encoder's output.
  Buffer<S> encode_images(const Buffer<S>& images) const {
    if (cfg.pixel_latents()) return images;
    NoGradGuard ng;
    return ae.encode(Var<S>::leaf(images, false)).val();
  }

  // Ancestral sampling for the requested layouts, decoded to images
  // [B, 3, res, res]. Grounding conditioning is used whenever the model
  // carries it.
  Buffer<S> sample_images(const std::vector<const SceneSpec*>& layouts, Rng& rng) const {
    NoGradGuard ng;
    Var<S> cap = captions(layouts);
    typename Denoiser<S>::Mode mode = mods.poi ? Denoiser<S>::Mode::with_grounding
                                               : Denoiser<S>::Mode::text_only;
    std::optional<GroundingBatch<S>> g;
    if (mods.poi) g.emplace(ground(layouts));
    Buffer<S> z = sample_latents(den, cap, mode, g ? &*g : nullptr, sched, cfg.sample_steps, rng);
    return decode_latents(z, cfg, cfg.pixel_latents() ? nullptr : &ae);
  }

  // Architecture keys the base weights depend on; differing values would make
  // the checkpoint silently meaningless even where shapes happen to agree.
  static void require_same_backbone(const Config& a, const Config& b) {
    std::vector<std::string> bad;
    auto chk = [&](const char* key, auto va, auto vb) {
      if (va != vb) bad.push_back(key);
    };
    chk("resolution", a.resolution, b.resolution);
    chk("unet_widths", a.unet_widths, b.unet_widths);
    chk("unet_stages", a.unet_stages, b.unet_stages);
    chk("l_txt", a.l_txt, b.l_txt);
    chk("attn_heads", a.attn_heads, b.attn_heads);
    chk("t_emb_dim", a.t_emb_dim, b.t_emb_dim);
    chk("groupnorm_groups", a.groupnorm_groups, b.groupnorm_groups);
    chk("d_model", a.d_model, b.d_model);
    chk("diffusion_t", a.diffusion_t, b.diffusion_t);
    chk("beta_min", a.beta_min, b.beta_min);
    chk("beta_max", a.beta_max, b.beta_max);
    chk("latent_mode", a.latent_mode, b.latent_mode);
    if (!bad.empty()) {
      std::string msg = "checkpoint config incompatible with requested config, differing keys:";
      for (const auto& k : bad) msg += " " + k;
      throw ConfigError(msg);
    }
  }

 private:
  void add_finetune_modules(Rng& rng, ModuleSet m) {
    mods = m;
    if (mods.poi) {
      grounding = GroundingEncoder<S>::build(params, cfg, rng);
      const auto variant = GatedAttention<S>::parse_variant(cfg.attention_variant);
      for (const auto& stage : insertion_plan(cfg)) {
        const int depth = stage[1] - '1';
        const int width = stage[0] == 'D' ? cfg.unet_widths[depth]
                                          : cfg.unet_widths[cfg.unet_stages - 1 - depth];
        den.ga.emplace(stage, GatedAttention<S>::build(params, "ga." + stage, variant, width,
                                                       cfg.d_model, cfg.attn_heads, rng));
      }
      den.has_grounding = true;
    }
    if (mods.pog) {
      head = PerceptionHead<S>::build(params, cfg, rng);
      weights = LossWeights<S>::build(params, cfg);
    }
  }

  void set_finetune_trainable() {
    params.set_all_trainable(false);
    if (mods.poi) {
      params.set_trainable("grounding.", true);
      params.set_trainable("ga.", true);
    }
    if (mods.pog) {
      params.set_trainable("pog.", true);
      // fixed-weight mode has no loss parameters to thaw
      if (params.has("loss.raw_alpha")) params.set_trainable("loss.", true);
    }
  }
};

struct TrainResult {
  std::string checkpoint;
  std::string metrics;
  int steps = 0;
  double final_loss = 0;  // mean total loss over the last logging window
  nlohmann::json summary;
};

TrainResult train_base(const Config& c, const DatasetManifest& data, const std::string& out_dir);

struct FinetuneOptions {
  ModuleSet mods;
  int steps_override = 0;        // 0: config's finetune_steps
  uint64_t seed_offset = 0;      // varies the training stream across repeats
};

// Frozen-base fine-tuning; only the grounding, attention-gate, perception and
// loss-weight parameters move. Passing a spatiallock checkpoint resumes it,
// provided the module set and insertion plan agree.
TrainResult train_spatiallock(const Config& c, const std::string& base_ckpt,
                              const DatasetManifest& data, const std::string& out_dir,
                              const FinetuneOptions& opt = {});

// The measuring instrument: detector trained on rendered scenes, validated on
// a held-out split before it is allowed to score generations.
TrainResult train_eval_detector(const Config& c, const DatasetManifest& train,
                                const DatasetManifest& val, const std::string& out_dir);

// A detector reconstructed from its checkpoint.
struct DetectorBundle {
  Config cfg;  // generation-profile config the detector was derived from
  ParamStore<float> params;
  EvalDetector<float> det;
  AnchorGrid grid;

  static DetectorBundle load(const std::string& ckpt_path);
};

// Per-image detections at the detector's operating thresholds.
std::vector<std::vector<Detection>> detect_images(DetectorBundle& d,
                                                  const std::vector<Buffer<float>>& images);

// Pooled feature rows [N, d_feat] for a set of images.
Buffer<float> detector_features(DetectorBundle& d, const std::vector<Buffer<float>>& images);

struct GenerationEval {
  double mean_iou = 0;
  double map50 = 0;
  double fid = 0;  // real features vs generated features
  int n_layouts = 0;
  LayoutReport layout;
};

// Samples one image per requested layout, detects, and scores layout
// adherence plus feature-distribution distance against the real images.
GenerationEval evaluate_generation(const GenerationModel<float>& model, DetectorBundle& det,
                                   const std::vector<SceneSpec>& layouts,
                                   const std::vector<Buffer<float>>& real_images,
                                   uint64_t sample_seed);

}  // namespace boxgen
