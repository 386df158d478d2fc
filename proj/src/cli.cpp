#include "boxgen/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "boxgen/ablation.hpp"
#include "boxgen/data_synth.hpp"
#include "boxgen/eval.hpp"
#include "boxgen/image.hpp"
#include "boxgen/training.hpp"
#include "boxgen/vocab.hpp"

namespace boxgen {
namespace {

namespace fs = std::filesystem;

// Accepts either a manifest.jsonl path or the split directory containing one.
std::string resolve_manifest(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) {
    fs::path m = p / "manifest.jsonl";
    if (fs::exists(m)) return m.string();
    throw ValidationError("no manifest.jsonl under " + path);
  }
  return path;
}

uint64_t split_seed(const Config& c, const std::string& split) {
  if (split == "train") return kTrainSeed0 + c.seed;
  if (split == "val") return kValSeed0 + c.seed;
  uint64_t h = 1469598103934665603ull;
  for (char ch : split) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h % 1000000007ull + c.seed;
}

int name_index(const std::vector<std::string>& names, const std::string& s, const char* kind) {
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<int>(i);
  std::string all;
  for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
  throw ValidationError("unknown " + std::string(kind) + " '" + s + "' (expected one of: " + all +
                        ")");
}

std::string category_name(int cat) {
  return vocab::color_names()[vocab::color_of(cat)] + "_" +
         vocab::shape_names()[vocab::shape_of(cat)];
}

// Layout file: a JSON array of scenes, each {"objects": [{"box": [x0,y0,x1,y1],
// "category": k | "shape": "...", "color": "..."}], "caption"?, "background"?}.
// A missing caption is synthesized the same way the dataset generator does it.
std::vector<SceneSpec> read_layouts(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open layout file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("layout file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_array() || j.empty())
    throw ValidationError("layout file must be a non-empty JSON array of scenes");
  std::vector<SceneSpec> out;
  for (size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    const std::string at = "layout " + std::to_string(i) + ": ";
    if (!e.contains("objects") || !e["objects"].is_array() || e["objects"].empty())
      throw ValidationError(at + "needs a non-empty objects array");
    SceneSpec s;
    for (const auto& o : e["objects"]) {
      ObjectSpec obj;
      if (o.contains("category")) {
        obj.category = o["category"].get<int>();
        if (obj.category < 0 || obj.category >= vocab::kNumCategories)
          throw ValidationError(at + "category " + std::to_string(obj.category) + " out of range");
      } else if (o.contains("shape") && o.contains("color")) {
        const int shape = name_index(vocab::shape_names(), o["shape"].get<std::string>(), "shape");
        const int color = name_index(vocab::color_names(), o["color"].get<std::string>(), "color");
        obj.category = shape * vocab::kNumColors + color;
      } else {
        throw ValidationError(at + "each object needs category or shape+color");
      }
      if (!o.contains("box") || !o["box"].is_array() || o["box"].size() != 4)
        throw ValidationError(at + "box must be [x0, y0, x1, y1]");
      obj.box = {o["box"][0].get<double>(), o["box"][1].get<double>(), o["box"][2].get<double>(),
                 o["box"][3].get<double>()};
      if (!(obj.box.x0 >= 0 && obj.box.x0 < obj.box.x1 && obj.box.x1 <= 1.0 && obj.box.y0 >= 0 &&
            obj.box.y0 < obj.box.y1 && obj.box.y1 <= 1.0))
        throw ValidationError(at + "box corners must satisfy 0 <= lo < hi <= 1");
      s.objects.push_back(obj);
    }
    s.background_id = e.value("background", 0);
    if (s.background_id < 0 || s.background_id >= vocab::kNumBackgrounds)
      throw ValidationError(at + "background id out of range");
    s.caption = e.value("caption", std::string());
    if (s.caption.empty()) s.caption = make_caption(s);
    out.push_back(std::move(s));
  }
  return out;
}

void print_train_result(const TrainResult& r) {
  std::cout << "checkpoint: " << r.checkpoint << "\n"
            << "metrics:    " << r.metrics << "\n"
            << "final loss: " << r.final_loss << "\n";
}

int cmd_gen_data(const std::string& config, const std::string& out, int n,
                 const std::string& split, int64_t seed) {
  Config c = load_config(config);
  const uint64_t s0 = seed >= 0 ? static_cast<uint64_t>(seed) : split_seed(c, split);
  DatasetManifest m = generate_dataset(c, out, split, s0, n);
  std::cout << "wrote " << m.records.size() << " records under " << out << "/" << split << "\n";
  return 0;
}

int cmd_train_base(const std::string& config, const std::string& data, const std::string& out) {
  Config c = load_config(config);
  print_train_result(train_base(c, read_manifest(resolve_manifest(data)), out));
  return 0;
}

int cmd_train(const std::string& config, const std::string& base, const std::string& data,
              const std::string& out) {
  Config c = load_config(config);
  FinetuneOptions fo;
  fo.mods = {true, c.perception_enabled};
  print_train_result(train_spatiallock(c, base, read_manifest(resolve_manifest(data)), out, fo));
  return 0;
}

int cmd_train_detector(const std::string& config, const std::string& data, const std::string& val,
                       const std::string& out) {
  Config c = load_config(config);
  TrainResult r = train_eval_detector(c, read_manifest(resolve_manifest(data)),
                                      read_manifest(resolve_manifest(val)), out);
  print_train_result(r);
  std::cout << "val map50:  " << r.summary["val_map50"].get<double>() << "\n"
            << "val iou:    " << r.summary["val_mean_iou"].get<double>() << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& specs, const std::string& out,
               uint64_t seed) {
  GenerationModel<float> model = GenerationModel<float>::load(ckpt);
  std::vector<SceneSpec> layouts = read_layouts(specs);
  fs::create_directories(out);
  Rng rng(seed);
  const int res = model.cfg.resolution;
  const int64_t stride = 3ll * res * res;
  const size_t chunk = static_cast<size_t>(std::max(1, model.cfg.batch_size));
  nlohmann::json index = nlohmann::json::array();
  for (size_t lo = 0; lo < layouts.size(); lo += chunk) {
    const size_t hi = std::min(layouts.size(), lo + chunk);
    std::vector<const SceneSpec*> batch;
    for (size_t i = lo; i < hi; ++i) batch.push_back(&layouts[i]);
    Buffer<float> imgs = model.sample_images(batch, rng);
    for (size_t i = lo; i < hi; ++i) {
      Buffer<float> img({3, res, res});
      std::copy_n(imgs.data() + static_cast<int64_t>(i - lo) * stride, stride, img.data());
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%06zu.ppm", i);
      write_ppm(out + "/" + name, img);
      index.push_back({{"image", name}, {"caption", layouts[i].caption}});
    }
  }
  std::ofstream idx(out + "/samples.json");
  if (!idx) throw RuntimeFailure("cannot write " + out + "/samples.json");
  idx << index.dump(2) << "\n";
  std::cout << "wrote " << layouts.size() << " images under " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& det_path, const std::string& data,
             const std::string& report, bool plots, uint64_t seed) {
  GenerationModel<float> model = GenerationModel<float>::load(ckpt);
  DetectorBundle det = DetectorBundle::load(det_path);
  Dataset val = Dataset::load(read_manifest(resolve_manifest(data)));
  GenerationEval ev = evaluate_generation(model, det, val.scenes, val.images, seed);

  nlohmann::json per_cat = nlohmann::json::object();
  for (const auto& [cat, iou] : ev.layout.per_category_iou) per_cat[category_name(cat)] = iou;
  nlohmann::json rep{{"mean_iou", ev.mean_iou},
                     {"map50", ev.map50},
                     {"fid", ev.fid},
                     {"n_layouts", ev.n_layouts},
                     {"sample_seed", seed},
                     {"per_category_iou", per_cat},
                     {"detection_map", ev.layout.detection_map.map}};
  if (fs::path(report).has_parent_path()) fs::create_directories(fs::path(report).parent_path());
  {
    std::ofstream f(report);
    if (!f) throw RuntimeFailure("cannot write report: " + report);
    f << rep.dump(2) << "\n";
  }

  if (plots) {
    fs::path stem(report);
    stem.replace_extension();
    write_hist_svg(stem.string() + "_iou_hist.svg", ev.layout.object_ious, 20, 0.0, 1.0,
                   "requested-object IoU");
    // detector sanity on the real split: PR for its most populated category
    auto dets = detect_images(det, val.images);
    std::vector<std::vector<ObjectSpec>> gt;
    for (const auto& s : val.scenes) gt.push_back(s.objects);
    std::map<int, int> counts;
    for (const auto& g : gt)
      for (const auto& o : g) ++counts[o.category];
    int best = 0, best_n = -1;
    for (const auto& [cat, n] : counts)
      if (n > best_n) best = cat, best_n = n;
    write_pr_svg(stem.string() + "_detector_pr.svg", category_pr(dets, gt, best, 0.5),
                 category_name(best) + " detector PR at IoU 0.5");
  }
  std::cout << "mean IoU " << ev.mean_iou << ", map50 " << ev.map50 << ", fid " << ev.fid
            << " over " << ev.n_layouts << " layouts\n"
            << "report: " << report << "\n";
  return 0;
}

int cmd_ablate(const std::string& campaign, const std::string& config, const std::string& out,
               int seeds, int train_n, int val_n, int steps, double budget_hours) {
  Config c = load_config(config);
  AblationOptions opt;
  opt.n_seeds = seeds > 0 ? seeds : (campaign == "components" ? 3 : 1);
  opt.n_train = train_n;
  opt.n_val = val_n;
  opt.finetune_steps = steps;
  opt.budget_hours = budget_hours;
  AblationReport rep = run_ablation(campaign, c, out, opt);
  std::cout << rep.table() << "report: " << out << "/report_" << campaign << ".json\n";
  return 0;
}

int cmd_check_config(const std::string& config) {
  std::cout << load_config(config).to_json().dump(2) << "\n";
  return 0;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  CLI::App app{"layout-grounded diffusion workbench", "boxgen"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "render a synthetic split and write its manifest");
  std::string g_config, g_out, g_split = "train";
  int g_n = 0;
  int64_t g_seed = -1;
  gen->add_option("--config", g_config, "profile json")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", g_out, "dataset root directory")->required();
  gen->add_option("--n", g_n, "number of scenes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--split", g_split, "split name")->capture_default_str();
  gen->add_option("--seed", g_seed, "base scene seed (default derives from config seed and split)");
  gen->callback([&] { cmd_gen_data(g_config, g_out, g_n, g_split, g_seed); });

  auto* tb = app.add_subcommand("train-base", "pretrain the text-only diffusion backbone");
  std::string tb_config, tb_data, tb_out;
  tb->add_option("--config", tb_config, "profile json")->required()->check(CLI::ExistingFile);
  tb->add_option("--data", tb_data, "train manifest or split directory")
      ->required()
      ->check(CLI::ExistingPath);
  tb->add_option("--out", tb_out, "output directory")->required();
  tb->callback([&] { cmd_train_base(tb_config, tb_data, tb_out); });

  auto* tr = app.add_subcommand(
      "train", "fine-tune grounding modules on a frozen base (perception head per config)");
  std::string tr_config, tr_base, tr_data, tr_out;
  tr->add_option("--config", tr_config, "profile json")->required()->check(CLI::ExistingFile);
  tr->add_option("--base", tr_base, "base checkpoint (or one of these runs to resume)")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "train manifest or split directory")
      ->required()
      ->check(CLI::ExistingPath);
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->callback([&] { cmd_train(tr_config, tr_base, tr_data, tr_out); });

  auto* td = app.add_subcommand("train-detector", "train and validate the scoring detector");
  std::string td_config, td_data, td_val, td_out;
  td->add_option("--config", td_config, "profile json")->required()->check(CLI::ExistingFile);
  td->add_option("--data", td_data, "train manifest or split directory")
      ->required()
      ->check(CLI::ExistingPath);
  td->add_option("--val", td_val, "held-out manifest or split directory")
      ->required()
      ->check(CLI::ExistingPath);
  td->add_option("--out", td_out, "output directory")->required();
  td->callback([&] { cmd_train_detector(td_config, td_data, td_val, td_out); });

  auto* sa = app.add_subcommand("sample", "generate images for a file of requested layouts");
  std::string sa_ckpt, sa_specs, sa_out;
  uint64_t sa_seed = 0;
  sa->add_option("--ckpt", sa_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  sa->add_option("--specs", sa_specs, "layout json (array of scenes)")
      ->required()
      ->check(CLI::ExistingFile);
  sa->add_option("--out", sa_out, "output directory")->required();
  sa->add_option("--seed", sa_seed, "sampling seed")->capture_default_str();
  sa->callback([&] { cmd_sample(sa_ckpt, sa_specs, sa_out, sa_seed); });

  auto* ev = app.add_subcommand("eval", "score a model's layout adherence on a held-out split");
  std::string ev_ckpt, ev_det, ev_data, ev_report;
  bool ev_plots = false;
  uint64_t ev_seed = kSampleSeed0;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--detector", ev_det, "detector checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "held-out manifest or split directory")
      ->required()
      ->check(CLI::ExistingPath);
  ev->add_option("--report", ev_report, "output report json")->required();
  ev->add_flag("--plots", ev_plots, "write svg plots next to the report");
  ev->add_option("--seed", ev_seed, "sampling seed")->capture_default_str();
  ev->callback([&] { cmd_eval(ev_ckpt, ev_det, ev_data, ev_report, ev_plots, ev_seed); });

  auto* ab = app.add_subcommand("ablate", "run a variant campaign end to end");
  std::string ab_campaign, ab_config, ab_out;
  int ab_seeds = 0, ab_train_n = 512, ab_val_n = 200, ab_steps = 0;
  double ab_budget = 6.0;
  ab->add_option("--campaign", ab_campaign, "components, insertion or loss_weights")->required();
  ab->add_option("--config", ab_config, "campaign profile json")
      ->required()
      ->check(CLI::ExistingFile);
  ab->add_option("--out", ab_out, "campaign directory (reused across invocations)")->required();
  ab->add_option("--seeds", ab_seeds, "fine-tune repeats per variant (default 3 for components, else 1)");
  ab->add_option("--train-n", ab_train_n, "train scenes")->capture_default_str();
  ab->add_option("--val-n", ab_val_n, "held-out scenes")->capture_default_str();
  ab->add_option("--steps", ab_steps, "fine-tune steps (default: config value)");
  ab->add_option("--budget-hours", ab_budget, "wall-clock budget")->capture_default_str();
  ab->callback([&] {
    cmd_ablate(ab_campaign, ab_config, ab_out, ab_seeds, ab_train_n, ab_val_n, ab_steps,
               ab_budget);
  });

  auto* cc = app.add_subcommand("check-config", "validate a profile and print it normalized");
  std::string cc_config;
  cc->add_option("--config", cc_config, "profile json")->required()->check(CLI::ExistingFile);
  cc->callback([&] { cmd_check_config(cc_config); });

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace boxgen
