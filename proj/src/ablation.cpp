#include "boxgen/ablation.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace boxgen {

namespace fs = std::filesystem;

std::vector<VariantSpec> campaign_variants(const std::string& campaign) {
  std::vector<VariantSpec> v;
  auto add = [&](const std::string& name, bool poi, bool pog) -> VariantSpec& {
    VariantSpec s;
    s.name = name;
    s.mods = {poi, pog};
    v.push_back(std::move(s));
    return v.back();
  };
  if (campaign == "components") {
    add("baseline", false, false).baseline = true;
    add("poi", true, false);
    add("pog", false, true).enh = false;
    add("pog_enh", false, true).enh = true;
    add("poi_pog", true, true).enh = false;
    add("poi_pog_enh", true, true).enh = true;
  } else if (campaign == "insertion") {
    auto ins = [&](const std::string& name, std::vector<std::string> stages) {
      add(name, true, true).insertion_stages = std::move(stages);
    };
    ins("all_stages", {"D1", "D2", "D3", "U1", "U2", "U3"});
    ins("down_only", {"D1", "D2", "D3"});
    ins("up_only", {"U1", "U2", "U3"});
    ins("mid_four", {"D2", "D3", "U1", "U2"});
    ins("d3_u1", {"D3", "U1"});
  } else if (campaign == "loss_weights") {
    auto fixed = [&](const std::string& name, double a, double b) {
      VariantSpec& s = add(name, true, true);
      s.loss_mode = "fixed";
      s.fixed_alpha = a;
      s.fixed_beta = b;
    };
    fixed("fixed_1_0", 1.0, 0.0);
    fixed("fixed_09_01", 0.9, 0.1);
    fixed("fixed_05_05", 0.5, 0.5);
    fixed("fixed_01_09", 0.1, 0.9);
    fixed("fixed_0_1", 0.0, 1.0);
    add("trainable", true, true).loss_mode = "trainable";
  } else {
    throw ValidationError("unknown campaign '" + campaign +
                          "' (expected components, insertion or loss_weights)");
  }
  return v;
}

Config variant_config(const Config& campaign_cfg, const VariantSpec& v) {
  Config c = campaign_cfg;
  c.perception_enabled = v.mods.pog;
  c.enh_fusion_enabled = v.enh;
  if (!v.insertion_stages.empty()) c.insertion_stages = v.insertion_stages;
  if (!v.loss_mode.empty()) {
    c.loss_weight_mode = v.loss_mode;
    if (v.loss_mode == "fixed") {
      c.fixed_alpha = v.fixed_alpha;
      c.fixed_beta = v.fixed_beta;
    }
  }
  validate_config(c);
  return c;
}

namespace {

DatasetManifest ensure_split(const Config& c, const std::string& data_dir,
                             const std::string& split, uint64_t seed0, int n) {
  const std::string mpath = (fs::path(data_dir) / split / "manifest.jsonl").string();
  if (fs::exists(mpath)) {
    DatasetManifest m = read_manifest(mpath);
    if (static_cast<int>(m.records.size()) == n &&
        config_hash(config_from_json(m.config_snapshot)) == config_hash(c))
      return m;
    throw ConfigError("existing dataset at " + mpath +
                      " was generated under a different config or size; use a fresh out dir");
  }
  return generate_dataset(c, data_dir, split, seed0, n);
}

// Reuses the artifact when its embedded config matches, otherwise trains it.
std::string ensure_base(const Config& c, const DatasetManifest& data, const std::string& dir) {
  const std::string ckpt = dir + "/base.ckpt";
  if (fs::exists(ckpt)) {
    const CheckpointMeta meta = read_checkpoint_meta(ckpt);
    if (meta.phase == "base" && config_hash(config_from_json(meta.config)) == config_hash(c))
      return ckpt;
    throw ConfigError("existing base checkpoint at " + ckpt +
                      " was trained under a different config; use a fresh out dir");
  }
  return train_base(c, data, dir).checkpoint;
}

std::string ensure_detector(const Config& c, const DatasetManifest& train,
                            const DatasetManifest& val, const std::string& dir,
                            double* map50, double* mean_iou) {
  const std::string ckpt = dir + "/detector.ckpt";
  if (fs::exists(ckpt)) {
    const CheckpointMeta meta = read_checkpoint_meta(ckpt);
    if (meta.phase == "detector" && config_hash(config_from_json(meta.config)) == config_hash(c)) {
      *map50 = meta.extra.value("val_map50", 0.0);
      *mean_iou = meta.extra.value("val_mean_iou", 0.0);
      return ckpt;
    }
    throw ConfigError("existing detector checkpoint at " + ckpt +
                      " was trained under a different config; use a fresh out dir");
  }
  TrainResult r = train_eval_detector(c, train, val, dir);
  *map50 = r.summary.value("val_map50", 0.0);
  *mean_iou = r.summary.value("val_mean_iou", 0.0);
  return r.checkpoint;
}

struct RunKey {
  uint64_t cfg_hash;
  int steps;
  uint64_t seed_offset;
  uint64_t sample_seed;
};

bool load_cached_score(const std::string& path, const RunKey& key, SeedScore* out) {
  std::ifstream f(path);
  if (!f) return false;
  try {
    nlohmann::json j = nlohmann::json::parse(f);
    if (j.at("cfg_hash").get<uint64_t>() != key.cfg_hash) return false;
    if (j.at("steps").get<int>() != key.steps) return false;
    if (j.at("seed_offset").get<uint64_t>() != key.seed_offset) return false;
    if (j.at("sample_seed").get<uint64_t>() != key.sample_seed) return false;
    out->seed_offset = key.seed_offset;
    out->iou = j.at("iou").get<double>();
    out->map50 = j.at("map50").get<double>();
    out->fid = j.at("fid").get<double>();
    return true;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

void save_score(const std::string& path, const RunKey& key, const SeedScore& s) {
  nlohmann::json j = {{"cfg_hash", key.cfg_hash},     {"steps", key.steps},
                      {"seed_offset", key.seed_offset}, {"sample_seed", key.sample_seed},
                      {"iou", s.iou},                  {"map50", s.map50},
                      {"fid", s.fid}};
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write run result: " + path);
  f << j.dump(2) << "\n";
}

const VariantResult* find_variant(const std::vector<VariantResult>& rows, const std::string& n) {
  for (const auto& r : rows)
    if (r.name == n) return &r;
  return nullptr;
}

// Directional read-outs the campaigns exist to produce.
nlohmann::json build_comparisons(const std::string& campaign,
                                 const std::vector<VariantResult>& rows) {
  nlohmann::json c = nlohmann::json::object();
  if (campaign == "components") {
    const auto* full = find_variant(rows, "poi_pog_enh");
    const auto* pair = find_variant(rows, "poi_pog");
    const auto* poi = find_variant(rows, "poi");
    const auto* pog = find_variant(rows, "pog");
    const auto* base = find_variant(rows, "baseline");
    if (full && pair && poi && pog && base) {
      c["chain_holds"] = full->mean_iou >= pair->mean_iou && pair->mean_iou >= poi->mean_iou &&
                         poi->mean_iou > base->mean_iou;
      c["poi_minus_baseline_iou"] = poi->mean_iou - base->mean_iou;
      c["full_minus_baseline_iou"] = full->mean_iou - base->mean_iou;
      c["pog_below_poi"] = pog->mean_iou < poi->mean_iou;
      c["full_iou"] = full->mean_iou;
    }
  } else if (campaign == "insertion") {
    const auto* sel = find_variant(rows, "d3_u1");
    const auto* all = find_variant(rows, "all_stages");
    if (sel && all) {
      c["d3_u1_iou"] = sel->mean_iou;
      c["all_stages_iou"] = all->mean_iou;
      c["d3_u1_fid"] = sel->mean_fid;
      c["all_stages_fid"] = all->mean_fid;
      c["selective_wins_both"] = sel->mean_iou > all->mean_iou && sel->mean_fid < all->mean_fid;
    }
  } else if (campaign == "loss_weights") {
    const auto* tr = find_variant(rows, "trainable");
    double best_fixed = -1;
    std::string best_name;
    for (const auto& r : rows) {
      if (r.name == "trainable") continue;
      if (r.mean_iou > best_fixed) {
        best_fixed = r.mean_iou;
        best_name = r.name;
      }
    }
    if (tr && best_fixed >= 0) {
      c["trainable_iou"] = tr->mean_iou;
      c["best_fixed_iou"] = best_fixed;
      c["best_fixed_name"] = best_name;
      c["trainable_wins"] = tr->mean_iou >= best_fixed;
    }
  }
  return c;
}

// real vs held-out real, real vs generated, real vs uniform noise; the three
// distances any sane feature metric must order.
nlohmann::json fid_sanity(DetectorBundle& det, const Dataset& val, double full_fid) {
  nlohmann::json j = nlohmann::json::object();
  const size_t half = val.size() / 2;
  if (static_cast<int>(half) <= det.cfg.d_feat) return j;
  std::vector<Buffer<float>> a(val.images.begin(), val.images.begin() + half);
  std::vector<Buffer<float>> b(val.images.begin() + half, val.images.end());
  const double real_real = proxy_fid(detector_features(det, a), detector_features(det, b));

  Rng rng(kSampleSeed0 + 999);
  std::vector<Buffer<float>> noise;
  for (size_t i = 0; i < val.size(); ++i) {
    Buffer<float> img(val.images[0].shape);
    for (int64_t k = 0; k < img.numel(); ++k) img[k] = static_cast<float>(rng.uniform(-1, 1));
    noise.push_back(std::move(img));
  }
  const double real_noise =
      proxy_fid(detector_features(det, val.images), detector_features(det, noise));
  j["real_real"] = real_real;
  j["real_gen"] = full_fid;
  j["real_noise"] = real_noise;
  j["ordered"] = real_real < full_fid && full_fid < real_noise;
  return j;
}

}  // namespace

nlohmann::json AblationReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& v : variants) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& s : v.per_seed)
      seeds.push_back({{"seed_offset", s.seed_offset},
                       {"iou", s.iou},
                       {"map50", s.map50},
                       {"fid", s.fid}});
    rows.push_back({{"name", v.name},
                    {"mean_iou", v.mean_iou},
                    {"mean_map50", v.mean_map50},
                    {"mean_fid", v.mean_fid},
                    {"seeds", seeds}});
  }
  return {{"campaign", campaign},
          {"incomplete", incomplete},
          {"detector_map50", detector_map50},
          {"detector_mean_iou", detector_mean_iou},
          {"variants", rows},
          {"comparisons", comparisons}};
}

std::string AblationReport::table() const {
  char line[160];
  std::string out = "campaign: " + campaign + (incomplete ? "  [INCOMPLETE]" : "") + "\n";
  std::snprintf(line, sizeof(line), "%-14s %8s %8s %10s  (%d seed%s)\n", "variant", "iou",
                "map50", "fid", variants.empty() ? 0 : static_cast<int>(variants[0].per_seed.size()),
                !variants.empty() && variants[0].per_seed.size() == 1 ? "" : "s");
  out += line;
  for (const auto& v : variants) {
    std::snprintf(line, sizeof(line), "%-14s %8.4f %8.4f %10.4f\n", v.name.c_str(), v.mean_iou,
                  v.mean_map50, v.mean_fid);
    out += line;
  }
  return out;
}

AblationReport run_ablation(const std::string& campaign, const Config& cfg,
                            const std::string& out_dir, const AblationOptions& opt) {
  validate_config(cfg);
  const std::vector<VariantSpec> variants = campaign_variants(campaign);
  fs::create_directories(out_dir);
  const auto t_start = std::chrono::steady_clock::now();
  auto out_of_budget = [&] {
    const double h = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                         .count() / 3600.0;
    return h > opt.budget_hours;
  };

  // shared artifacts
  const std::string data_dir = out_dir + "/data";
  DatasetManifest train_m =
      ensure_split(cfg, data_dir, "train", kTrainSeed0 + cfg.seed, opt.n_train);
  DatasetManifest val_m = ensure_split(cfg, data_dir, "val", kValSeed0 + cfg.seed, opt.n_val);
  const std::string base_ckpt = ensure_base(cfg, train_m, out_dir + "/base");

  AblationReport report;
  report.campaign = campaign;
  const std::string det_ckpt = ensure_detector(cfg, train_m, val_m, out_dir + "/detector",
                                               &report.detector_map50, &report.detector_mean_iou);
  DetectorBundle det = DetectorBundle::load(det_ckpt);
  Dataset val = Dataset::load(val_m);

  const int ft_steps = opt.finetune_steps > 0 ? opt.finetune_steps : cfg.finetune_steps;
  double full_fid = 0;

  for (const auto& v : variants) {
    VariantResult row;
    row.name = v.name;
    const Config vc = variant_config(cfg, v);
    for (int k = 0; k < opt.n_seeds; ++k) {
      const std::string run_dir =
          out_dir + "/runs/" + campaign + "/" + v.name + "_s" + std::to_string(k);
      const RunKey key{config_hash(vc), v.baseline ? 0 : ft_steps,
                       static_cast<uint64_t>(k), kSampleSeed0 + static_cast<uint64_t>(k)};
      SeedScore score;
      if (!load_cached_score(run_dir + "/result.json", key, &score)) {
        if (out_of_budget()) {
          report.incomplete = true;
          break;
        }
        fs::create_directories(run_dir);
        GenerationModel<float> model;
        if (v.baseline) {
          model = GenerationModel<float>::load(base_ckpt);
        } else {
          FinetuneOptions fo;
          fo.mods = v.mods;
          fo.steps_override = ft_steps;
          fo.seed_offset = static_cast<uint64_t>(k);
          TrainResult ft = train_spatiallock(vc, base_ckpt, train_m, run_dir, fo);
          model = GenerationModel<float>::load(ft.checkpoint);
        }
        GenerationEval ev =
            evaluate_generation(model, det, val.scenes, val.images, key.sample_seed);
        score = SeedScore{key.seed_offset, ev.mean_iou, ev.map50, ev.fid};
        save_score(run_dir + "/result.json", key, score);
      }
      row.per_seed.push_back(score);
      row.mean_iou += score.iou;
      row.mean_map50 += score.map50;
      row.mean_fid += score.fid;
    }
    if (!row.per_seed.empty()) {
      const double n = static_cast<double>(row.per_seed.size());
      row.mean_iou /= n;
      row.mean_map50 /= n;
      row.mean_fid /= n;
      if (v.name == "poi_pog_enh" && !report.incomplete) full_fid = row.mean_fid;
      report.variants.push_back(std::move(row));
    }
    if (report.incomplete) break;
  }

  report.comparisons = build_comparisons(campaign, report.variants);
  if (campaign == "components" && full_fid > 0) {
    nlohmann::json sanity = fid_sanity(det, val, full_fid);
    if (!sanity.empty()) report.comparisons["fid_sanity"] = sanity;
  }

  const std::string stem = out_dir + "/report_" + campaign;
  {
    std::ofstream f(stem + ".json");
    if (!f) throw RuntimeFailure("cannot write report: " + stem + ".json");
    f << report.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(stem + ".txt");
    f << report.table();
  }
  return report;
}

}  // namespace boxgen
