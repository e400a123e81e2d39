#include "doctest.h"

#include "petal/config.hpp"
#include "petal/pipeline.hpp"

using namespace petal;

namespace {

std::string error_of(const std::string& text)
{
    try {
        parse_run_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_SUITE("config")
{
    TEST_CASE("empty document gives the defaults")
    {
        const RunConfig c = parse_run_config("{}");
        CHECK(c.injection.rank == 8);
        CHECK(c.injection.sites == InjectionConfig::recommended().sites);
        CHECK(c.train.initial_lr == 4e-5);
        CHECK(c.train.weight_decay == 0.1);
        CHECK(c.loss.variant == MarginVariant::arcface);
        CHECK(c.loss.resolved_margin() == 0.5);
        CHECK(c.loss.scale == 64.0);
        CHECK(c.gate.samples == 1000);
        CHECK(c.eval.probe_split == Split::probe);
    }

    TEST_CASE("unknown and mistyped keys name their path")
    {
        CHECK(error_of(R"({"train": {"epoch": 3}})").find("train.epoch") != std::string::npos);
        CHECK(error_of(R"({"colour": 1})").find("colour") != std::string::npos);
        CHECK(error_of(R"({"injection": {"rank": "eight"}})").find("injection.rank") != std::string::npos);
        CHECK(error_of(R"({"train": {"mode": "lora"}})").find("train.mode") != std::string::npos);
        CHECK(error_of(R"({"injection": {"sites": ["attention_qkv", "conv"]}})").find("conv") != std::string::npos);
        CHECK(error_of(R"({"pretrain": {"loss": {"kind": 1}}})").find("pretrain.loss.kind") != std::string::npos);
        CHECK_FALSE(error_of("[1, 2").empty());
        CHECK_FALSE(error_of(R"({"data": 3})").empty());
    }

    TEST_CASE("cross-field validation")
    {
        CHECK_FALSE(error_of(R"({"train": {"epochs": 2, "warmup_epochs": 2}})").empty());
        CHECK(error_of(R"({"train": {"epochs": 0, "warmup_epochs": 2}})").empty());
        CHECK_FALSE(error_of(R"({"backbone": {"image_size": 32}})").empty());
        CHECK_FALSE(error_of(R"({"gate": {"range": [1, 0]}})").empty());
        CHECK_FALSE(error_of(R"({"gate": {"estimator": "brisque"}})").empty());
        CHECK_FALSE(error_of(R"({"loss": {"scale": 0}})").empty());
        CHECK_FALSE(error_of(R"({"injection": {"rank": 0}})").empty());
        CHECK_FALSE(error_of(R"({"injection": {"preset": "everything"}})").empty());
    }

    TEST_CASE("seed fans out to every module")
    {
        const RunConfig c = parse_run_config(R"({"seed": 77})");
        CHECK(c.data.seed == 77);
        CHECK(c.train.seed == 77);
        CHECK(c.pretrain.train.seed == derive_seed(77, "pretrain"));
        CHECK(c.pretrain.train.mode == TrainMode::full_ft);
    }

    TEST_CASE("JSON round trip preserves every setting")
    {
        const std::string text = R"({
            "seed": 9, "out": "runs/x",
            "data": {"n_identities": 6, "unknown_identities": 2, "first_identity": 5,
                     "grid": [{"blur_sigma": 1.5, "jpeg_quality": 40}]},
            "backbone": {"depth": 3, "patch_reduction": false},
            "injection": {"preset": "attention+mlp", "rank": 4, "dropout_rate": 0.2},
            "gate": {"estimator": "precomputed", "range": [0, 10], "samples": 50},
            "loss": {"variant": "cosface", "scale": 30},
            "train": {"epochs": 5, "warmup_epochs": 1, "mode": "single_lora", "clip_norm": 2.0, "alpha_override": 0.25},
            "pretrain": {"identities": 10, "first_identity": 500, "loss": {"variant": "arcface", "margin": 0.3}},
            "eval": {"ranks": [1, 3], "fars": [0.01], "probe_split": "gallery", "probe_templates": true}
        })";
        const RunConfig a = parse_run_config(text);
        const std::string once = run_config_json(a);
        const RunConfig b = parse_run_config(once);
        CHECK(run_config_json(b) == once);
        CHECK(b.data.degradation_grid.size() == 1);
        CHECK(b.data.degradation_grid[0].jpeg_quality == 40);
        CHECK(b.injection.sites == InjectionConfig::preset("attention+mlp").sites);
        CHECK(b.injection.rank == 4);
        CHECK(b.gate.range == std::pair<double, double>{0, 10});
        CHECK(b.train.calibration_samples == 50);
        CHECK(b.train.alpha_override == 0.25);
        CHECK(b.loss.resolved_margin() == 0.35);
        CHECK(b.pretrain.loss.margin == 0.3);
        CHECK(b.pretrain.first_identity == 500);
        CHECK(b.eval.probe_split == Split::gallery);
        CHECK(b.eval.options.probe_templates);
    }

    TEST_CASE("pretrain pool must not overlap the benchmark")
    {
        const RunConfig ok = parse_run_config("{}");
        CHECK(pretrain_pool_spec(ok).first_identity == 1000);
        CHECK(pretrain_pool_spec(ok).n_identities == 48);
        const RunConfig bad = parse_run_config(R"({"pretrain": {"first_identity": 10}})");
        CHECK_THROWS_AS(pretrain_pool_spec(bad), ConfigError);
    }
}
