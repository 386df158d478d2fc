#include "boxgen/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace boxgen {

namespace {

// [B,3,H,W] stack of the chosen dataset images.
Buffer<float> stack_images(const std::vector<Buffer<float>>& pool,
                           const std::vector<int64_t>& idx) {
  const Shape& one = pool.at(0).shape;
  Buffer<float> out({static_cast<int>(idx.size()), one[0], one[1], one[2]});
  const int64_t per = pool[0].numel();
  for (size_t b = 0; b < idx.size(); ++b)
    std::copy_n(pool[idx[b]].data(), per, out.data() + b * per);
  return out;
}

std::vector<Buffer<float>> split_images(const Buffer<float>& batch) {
  const Shape& s = batch.shape;
  std::vector<Buffer<float>> out;
  const int64_t per = batch.numel() / s[0];
  for (int b = 0; b < s[0]; ++b) {
    Buffer<float> img({s[1], s[2], s[3]});
    std::copy_n(batch.data() + b * per, per, img.data());
    out.push_back(std::move(img));
  }
  return out;
}

double tail_mean(const std::vector<double>& xs, size_t window) {
  if (xs.empty()) return 0;
  const size_t n = std::min(window, xs.size());
  double s = 0;
  for (size_t i = xs.size() - n; i < xs.size(); ++i) s += xs[i];
  return s / static_cast<double>(n);
}

void check_finite(double loss, const char* phase, int step) {
  if (!std::isfinite(loss))
    throw TrainingError(std::string(phase) + " training diverged at step " +
                        std::to_string(step) + ": loss=" + std::to_string(loss));
}

}  // namespace

Dataset Dataset::load(const DatasetManifest& m) {
  Dataset d;
  d.scenes.reserve(m.records.size());
  d.images.reserve(m.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    d.scenes.push_back(m.records[i].scene);
    d.images.push_back(load_image(m, i));
  }
  return d;
}

TrainResult train_base(const Config& c, const DatasetManifest& data, const std::string& out_dir) {
  validate_config(c);
  std::filesystem::create_directories(out_dir);
  Dataset ds = Dataset::load(data);
  if (ds.size() == 0) throw ValidationError("train_base: dataset is empty");

  Rng rng(c.seed);
  auto model = GenerationModel<float>::build_base(c, rng);
  MetricsLog log(out_dir + "/base_metrics.jsonl");
  const int B = c.batch_size;
  const int T = c.diffusion_t;

  // Conv latent mode fits the small autoencoder first, then freezes it so
  // the denoiser trains against a fixed latent space.
  if (!c.pixel_latents()) {
    model.params.set_all_trainable(false);
    model.params.set_trainable("ae.", true);
    AdamWOptions ao;
    ao.lr = c.ae_lr;
    ao.grad_clip = c.grad_clip;
    AdamW<float> opt(model.params, ao);
    for (int s = 0; s < c.ae_steps; ++s) {
      std::vector<int64_t> idx(B);
      for (int b = 0; b < B; ++b) idx[b] = rng.uniform_int(0, ds.size() - 1);
      Var<float> x = Var<float>::leaf(stack_images(ds.images, idx), false);
      Var<float> l = model.ae.reconstruction_loss(x);
      const double lv = l.val()[0];
      check_finite(lv, "autoencoder", s);
      model.params.zero_grad();
      l.backward();
      const double gn = opt.step();
      if (s % c.log_every == 0 || s + 1 == c.ae_steps)
        log.log({{"phase", "ae"}, {"step", s}, {"loss", lv}, {"grad_norm", gn}});
    }
    model.params.set_all_trainable(true);
    model.params.set_trainable("ae.", false);
  }

  AdamWOptions ao;
  ao.lr = c.lr_base;
  ao.weight_decay = c.weight_decay;
  ao.grad_clip = c.grad_clip;
  AdamW<float> opt(model.params, ao);

  std::vector<double> losses;
  double first_loss = 0;
  for (int s = 0; s < c.base_steps; ++s) {
    const double lr = cosine_lr(c.lr_base, c.lr_base * c.lr_min_frac, s, c.base_steps);
    opt.set_lr(lr);

    std::vector<int64_t> idx(B);
    std::vector<const SceneSpec*> batch(B);
    std::vector<int> t(B);
    for (int b = 0; b < B; ++b) {
      idx[b] = rng.uniform_int(0, ds.size() - 1);
      batch[b] = &ds.scenes[idx[b]];
      t[b] = static_cast<int>(rng.uniform_int(0, T - 1));
    }
    Buffer<float> z0 = model.encode_images(stack_images(ds.images, idx));
    Buffer<float> eps(z0.shape);
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<float>(rng.normal());
    Buffer<float> zt = add_noise(z0, t, eps, model.sched);

    Var<float> cap = model.captions(batch);
    auto out = model.den.forward(Var<float>::leaf(zt, false), t, cap,
                                 Denoiser<float>::Mode::text_only);
    Var<float> l = generation_loss(Var<float>::leaf(eps, false), out.eps_hat);
    const double lv = l.val()[0];
    check_finite(lv, "base", s);
    if (s == 0) first_loss = lv;
    losses.push_back(lv);

    model.params.zero_grad();
    l.backward();
    const double gn = opt.step();
    if (s % c.log_every == 0 || s + 1 == c.base_steps)
      log.log({{"step", s}, {"l_sd", lv}, {"lr", lr}, {"grad_norm", gn}});
  }

  TrainResult r;
  r.checkpoint = out_dir + "/base.ckpt";
  r.metrics = log.path();
  r.steps = c.base_steps;
  r.final_loss = tail_mean(losses, c.log_every);
  r.summary = {{"first_loss", first_loss}, {"final_loss", r.final_loss}};
  model.save(r.checkpoint, "base",
             {{"steps", c.base_steps}, {"final_loss", r.final_loss}, {"data_dir", data.dir}});
  return r;
}

TrainResult train_spatiallock(const Config& c, const std::string& base_ckpt,
                              const DatasetManifest& data, const std::string& out_dir,
                              const FinetuneOptions& opt_in) {
  validate_config(c);
  std::filesystem::create_directories(out_dir);
  Dataset ds = Dataset::load(data);
  if (ds.size() == 0) throw ValidationError("train_spatiallock: dataset is empty");

  Rng rng(c.seed + opt_in.seed_offset);
  GenerationModel<float> model;
  const CheckpointMeta start_meta = read_checkpoint_meta(base_ckpt);
  if (start_meta.phase == "spatiallock") {
    // Resuming: the checkpoint's architecture is authoritative and must agree
    // with what was asked for.
    model = GenerationModel<float>::load(base_ckpt);
    const Config emb = config_from_json(start_meta.config);
    GenerationModel<float>::require_same_backbone(emb, c);
    if (emb.insertion_stages != c.insertion_stages || emb.attention_variant != c.attention_variant)
      throw ConfigError("resume with a different insertion plan: checkpoint uses another "
                        "insertion_stages/attention_variant setting");
    const ModuleSet want = opt_in.mods;
    if (model.mods.poi != want.poi || model.mods.pog != want.pog)
      throw ConfigError("resume with a different module set than the checkpoint");
    model.cfg = c;  // training-schedule knobs may differ; architecture was checked
  } else {
    model = GenerationModel<float>::build_finetune(c, base_ckpt, rng, opt_in.mods);
  }

  MetricsLog log(out_dir + "/spatiallock_metrics.jsonl");
  const int B = c.batch_size;
  const int T = c.diffusion_t;
  const int steps = opt_in.steps_override > 0 ? opt_in.steps_override : c.finetune_steps;
  const AnchorGrid grid = model.mods.pog ? make_anchors(c) : AnchorGrid{};

  AdamWOptions ao;
  ao.lr = c.lr_heads;
  ao.weight_decay = c.weight_decay;
  ao.grad_clip = c.grad_clip;
  AdamW<float> opt(model.params, ao);

  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    const double lr = cosine_lr(c.lr_heads, c.lr_heads * c.lr_min_frac, s, steps);
    opt.set_lr(lr);

    std::vector<int64_t> idx(B);
    std::vector<const SceneSpec*> batch(B);
    std::vector<std::vector<ObjectSpec>> gts(B);
    std::vector<int> t(B);
    std::vector<char> active(B, 1);
    for (int b = 0; b < B; ++b) {
      idx[b] = rng.uniform_int(0, ds.size() - 1);
      batch[b] = &ds.scenes[idx[b]];
      gts[b] = batch[b]->objects;
      t[b] = static_cast<int>(rng.uniform_int(0, T - 1));
      active[b] = t[b] < c.perception_t_max_frac * T ? 1 : 0;
    }
    Buffer<float> z0 = model.encode_images(stack_images(ds.images, idx));
    Buffer<float> eps(z0.shape);
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<float>(rng.normal());
    Buffer<float> zt = add_noise(z0, t, eps, model.sched);

    Var<float> cap = model.captions(batch);
    GroundingBatch<float> g;
    if (model.mods.poi) g = model.ground(batch);
    auto out = model.den.forward(Var<float>::leaf(zt, false), t, cap,
                                 model.mods.poi ? Denoiser<float>::Mode::with_grounding
                                                : Denoiser<float>::Mode::text_only,
                                 model.mods.poi ? &g : nullptr);
    Var<float> l_sd = generation_loss(Var<float>::leaf(eps, false), out.eps_hat);

    Var<float> total = l_sd;
    PerceptionLoss<float> pl;
    if (model.mods.pog) {
      auto po = model.head.forward(out.taps);
      pl = perception_loss(po, grid, gts, active, c);
      total = combined_loss(pl.total, l_sd, model.weights);
    }
    const double lv = total.val()[0];
    check_finite(lv, "spatiallock", s);
    losses.push_back(lv);

    model.params.zero_grad();
    total.backward();
    const double gn = opt.step();

    if (s % c.log_every == 0 || s + 1 == steps) {
      nlohmann::json j = {{"step", s}, {"loss", lv}, {"l_sd", l_sd.val()[0]},
                          {"lr", lr},  {"grad_norm", gn}};
      if (model.mods.pog) {
        NoGradGuard ng;
        j["l_cla"] = pl.cla.val()[0];
        j["l_reg"] = pl.reg.val()[0];
        j["n_pos"] = pl.n_pos;
        j["alpha"] = model.weights.alpha().val()[0];
        j["beta"] = model.weights.beta().val()[0];
      }
      if (model.mods.poi) {
        nlohmann::json gates = nlohmann::json::object();
        for (const auto& stage : insertion_plan(c))
          gates[stage] = model.params.get("ga." + stage + ".gamma").val()[0];
        j["gamma"] = gates;
      }
      log.log(j);
    }
  }

  TrainResult r;
  r.checkpoint = out_dir + "/spatiallock.ckpt";
  r.metrics = log.path();
  r.steps = steps;
  r.final_loss = tail_mean(losses, c.log_every);
  r.summary = {{"final_loss", r.final_loss}};
  model.save(r.checkpoint, "spatiallock",
             {{"steps", steps}, {"final_loss", r.final_loss}, {"data_dir", data.dir}});
  return r;
}

TrainResult train_eval_detector(const Config& c, const DatasetManifest& train,
                                const DatasetManifest& val, const std::string& out_dir) {
  validate_config(c);
  std::filesystem::create_directories(out_dir);
  Dataset tr = Dataset::load(train);
  Dataset va = Dataset::load(val);
  if (tr.size() == 0 || va.size() == 0)
    throw ValidationError("train_eval_detector: empty dataset split");

  Rng rng(c.seed + 7700);  // its own stream, unrelated to generation training
  DetectorBundle bundle;
  bundle.cfg = c;
  bundle.det = EvalDetector<float>::build(bundle.params, c, rng);
  bundle.grid = make_anchors(bundle.det.dcfg);
  MetricsLog log(out_dir + "/detector_metrics.jsonl");

  AdamWOptions ao;
  ao.lr = c.det_lr;
  ao.grad_clip = c.grad_clip;
  AdamW<float> opt(bundle.params, ao);

  const int B = c.det_batch;
  std::vector<double> losses;
  for (int s = 0; s < c.det_steps; ++s) {
    const double lr = cosine_lr(c.det_lr, c.det_lr * c.lr_min_frac, s, c.det_steps);
    opt.set_lr(lr);
    std::vector<int64_t> idx(B);
    std::vector<std::vector<ObjectSpec>> gts(B);
    for (int b = 0; b < B; ++b) {
      idx[b] = rng.uniform_int(0, tr.size() - 1);
      gts[b] = tr.scenes[idx[b]].objects;
    }
    Var<float> x = Var<float>::leaf(stack_images(tr.images, idx), false);
    auto out = bundle.det.forward(x);
    PerceptionLoss<float> pl =
        perception_loss(out, bundle.grid, gts, std::vector<char>(B, 1), bundle.det.dcfg);
    const double lv = pl.total.val()[0];
    check_finite(lv, "detector", s);
    losses.push_back(lv);
    bundle.params.zero_grad();
    pl.total.backward();
    const double gn = opt.step();
    if (s % c.log_every == 0 || s + 1 == c.det_steps)
      log.log({{"step", s}, {"loss", lv}, {"l_cla", pl.cla.val()[0]},
               {"l_reg", pl.reg.val()[0]}, {"n_pos", pl.n_pos}, {"lr", lr}, {"grad_norm", gn}});
  }

  // The instrument check: detect the held-out real scenes and score against
  // their true layouts.
  auto dets = detect_images(bundle, va.images);
  std::vector<std::vector<ObjectSpec>> requested;
  for (const auto& s : va.scenes) requested.push_back(s.objects);
  LayoutReport rep = layout_accuracy(dets, requested);

  TrainResult r;
  r.checkpoint = out_dir + "/detector.ckpt";
  r.metrics = log.path();
  r.steps = c.det_steps;
  r.final_loss = tail_mean(losses, c.log_every);
  r.summary = {{"val_map50", rep.detection_map.ap50},
               {"val_map", rep.detection_map.map},
               {"val_mean_iou", rep.mean_iou},
               {"final_loss", r.final_loss}};
  save_checkpoint(r.checkpoint, bundle.params,
                  CheckpointMeta{"detector", c.to_json(), r.summary});
  return r;
}

DetectorBundle DetectorBundle::load(const std::string& ckpt_path) {
  const CheckpointMeta meta = read_checkpoint_meta(ckpt_path);
  if (meta.phase != "detector")
    throw ValidationError("not a detector checkpoint (phase '" + meta.phase + "'): " + ckpt_path);
  DetectorBundle b;
  b.cfg = config_from_json(meta.config);
  Rng rng(0);
  b.det = EvalDetector<float>::build(b.params, b.cfg, rng);
  b.grid = make_anchors(b.det.dcfg);
  load_checkpoint(ckpt_path, b.params);
  return b;
}

std::vector<std::vector<Detection>> detect_images(DetectorBundle& d,
                                                  const std::vector<Buffer<float>>& images) {
  NoGradGuard ng;
  std::vector<std::vector<Detection>> out;
  const int B = d.cfg.det_batch;
  for (size_t i0 = 0; i0 < images.size(); i0 += B) {
    std::vector<int64_t> idx;
    for (size_t i = i0; i < std::min(images.size(), i0 + B); ++i)
      idx.push_back(static_cast<int64_t>(i));
    Var<float> x = Var<float>::leaf(stack_images(images, idx), false);
    auto res = decode_detections(d.det.forward(x), d.grid, d.det.dcfg);
    for (auto& one : res) out.push_back(std::move(one));
  }
  return out;
}

Buffer<float> detector_features(DetectorBundle& d, const std::vector<Buffer<float>>& images) {
  if (images.empty()) throw ValidationError("detector_features: no images");
  Buffer<float> out({static_cast<int>(images.size()), d.cfg.d_feat});
  const int B = d.cfg.det_batch;
  for (size_t i0 = 0; i0 < images.size(); i0 += B) {
    std::vector<int64_t> idx;
    for (size_t i = i0; i < std::min(images.size(), i0 + B); ++i)
      idx.push_back(static_cast<int64_t>(i));
    Var<float> x = Var<float>::leaf(stack_images(images, idx), false);
    Buffer<float> f = d.det.features(x);
    std::copy_n(f.data(), f.numel(), out.data() + static_cast<int64_t>(i0) * d.cfg.d_feat);
  }
  return out;
}

GenerationEval evaluate_generation(const GenerationModel<float>& model, DetectorBundle& det,
                                   const std::vector<SceneSpec>& layouts,
                                   const std::vector<Buffer<float>>& real_images,
                                   uint64_t sample_seed) {
  if (layouts.empty()) throw ValidationError("evaluate_generation: no layouts");
  if (model.cfg.resolution != det.cfg.resolution)
    throw ValidationError("evaluate_generation: model and detector resolutions differ");

  Rng rng(sample_seed);
  std::vector<Buffer<float>> gen;
  const size_t B = static_cast<size_t>(model.cfg.batch_size);
  for (size_t i0 = 0; i0 < layouts.size(); i0 += B) {
    std::vector<const SceneSpec*> chunk;
    for (size_t i = i0; i < std::min(layouts.size(), i0 + B); ++i) chunk.push_back(&layouts[i]);
    for (auto& img : split_images(model.sample_images(chunk, rng))) gen.push_back(std::move(img));
  }

  auto dets = detect_images(det, gen);
  std::vector<std::vector<ObjectSpec>> requested;
  for (const auto& s : layouts) requested.push_back(s.objects);
  LayoutReport rep = layout_accuracy(dets, requested);

  GenerationEval ev;
  ev.mean_iou = rep.mean_iou;
  ev.map50 = rep.detection_map.ap50;
  ev.n_layouts = static_cast<int>(layouts.size());
  ev.fid = proxy_fid(detector_features(det, real_images), detector_features(det, gen));
  ev.layout = std::move(rep);
  return ev;
}

}  // namespace boxgen
