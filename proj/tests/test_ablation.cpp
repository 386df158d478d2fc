#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "boxgen/ablation.hpp"

using namespace boxgen;

namespace {

Config micro_cfg() {
  Config c;
  c.resolution = 16;
  c.unet_widths = {8, 16, 32};
  c.d_model = 16;
  c.d_cat = 16;
  c.n_freqs = 2;
  c.d_grounding_hidden = 32;
  c.l_txt = 8;
  c.attn_heads = 4;
  c.t_emb_dim = 16;
  c.groupnorm_groups = 4;
  c.diffusion_t = 50;
  c.sample_steps = 8;
  c.fpn_channels = 8;
  c.d_seq = 16;
  c.enh_heads = 2;
  c.anchor_base_scale = 2.0;
  c.batch_size = 4;
  c.log_every = 10;
  c.base_steps = 6;
  c.finetune_steps = 3;
  c.det_steps = 10;
  c.det_batch = 4;
  c.d_feat = 8;
  return c;
}

}  // namespace

TEST_CASE("campaign grids carry the fixed variant sets") {
  auto comp = campaign_variants("components");
  REQUIRE(comp.size() == 6);
  CHECK(comp[0].baseline);
  CHECK(comp[1].name == "poi");
  CHECK(!comp[1].mods.pog);
  CHECK(comp[2].name == "pog");
  CHECK(!comp[2].mods.poi);
  CHECK(!comp[2].enh);
  CHECK(comp[3].enh);
  CHECK(comp[5].name == "poi_pog_enh");
  CHECK(comp[5].mods.poi);
  CHECK(comp[5].mods.pog);

  auto ins = campaign_variants("insertion");
  REQUIRE(ins.size() == 5);
  CHECK(ins[0].insertion_stages.size() == 6);
  CHECK(ins[1].insertion_stages == std::vector<std::string>{"D1", "D2", "D3"});
  CHECK(ins[2].insertion_stages == std::vector<std::string>{"U1", "U2", "U3"});
  CHECK(ins[3].insertion_stages.size() == 4);
  CHECK(ins[4].insertion_stages == std::vector<std::string>{"D3", "U1"});

  auto lw = campaign_variants("loss_weights");
  REQUIRE(lw.size() == 6);
  CHECK(lw[0].fixed_alpha == 1.0);
  CHECK(lw[0].fixed_beta == 0.0);
  CHECK(lw[4].fixed_alpha == 0.0);
  CHECK(lw[4].fixed_beta == 1.0);
  CHECK(lw[5].name == "trainable");
  CHECK(lw[5].loss_mode == "trainable");

  CHECK_THROWS_AS(campaign_variants("nope"), ValidationError);
}

TEST_CASE("variant configs specialize and stay valid") {
  Config c = micro_cfg();
  for (const char* campaign : {"components", "insertion", "loss_weights"}) {
    for (const auto& v : campaign_variants(campaign)) {
      Config vc = variant_config(c, v);  // validates internally
      CHECK(vc.perception_enabled == v.mods.pog);
      CHECK(vc.enh_fusion_enabled == v.enh);
    }
  }
  auto ins = campaign_variants("insertion");
  CHECK(variant_config(c, ins[4]).insertion_stages ==
        std::vector<std::string>{"D3", "U1"});
  auto lw = campaign_variants("loss_weights");
  Config fixed = variant_config(c, lw[2]);
  CHECK(fixed.loss_weight_mode == "fixed");
  CHECK(fixed.fixed_alpha == 0.5);
  CHECK(fixed.fixed_beta == 0.5);
}

TEST_CASE("a micro components campaign runs, reports, and resumes from cache") {
  Config c = micro_cfg();
  const std::string dir = "ablation_scratch";
  std::filesystem::remove_all(dir);

  AblationOptions opt;
  opt.n_seeds = 1;
  opt.n_train = 6;
  opt.n_val = 10;

  auto rep = run_ablation("components", c, dir, opt);
  CHECK(rep.campaign == "components");
  CHECK(!rep.incomplete);
  REQUIRE(rep.variants.size() == 6);
  for (const auto& v : rep.variants) {
    REQUIRE(v.per_seed.size() == 1);
    CHECK(v.mean_iou >= 0.0);
    CHECK(v.mean_iou <= 1.0);
    CHECK(std::isfinite(v.mean_fid));
  }
  CHECK(rep.comparisons.contains("chain_holds"));
  CHECK(rep.comparisons.contains("pog_below_poi"));
  // too few val images for a d_feat-dimensional gaussian fit: sanity block omitted
  CHECK(!rep.comparisons.contains("fid_sanity"));
  CHECK(std::filesystem::exists(dir + "/report_components.json"));
  CHECK(std::filesystem::exists(dir + "/report_components.txt"));
  CHECK(std::filesystem::exists(dir + "/runs/components/poi_s0/result.json"));
  CHECK(rep.table().find("poi_pog_enh") != std::string::npos);

  // second invocation reuses every artifact and reproduces the report
  auto rep2 = run_ablation("components", c, dir, opt);
  CHECK(rep.to_json() == rep2.to_json());

  // a zero budget with no cache yields a flagged partial report
  auto rep3 = run_ablation("components", c, dir + "/fresh",
                           [&] {
                             AblationOptions o = opt;
                             o.budget_hours = 0.0;
                             return o;
                           }());
  CHECK(rep3.incomplete);
  CHECK(rep3.variants.empty());

  std::filesystem::remove_all(dir);
}
