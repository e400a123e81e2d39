#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 3,
  "data": {"n_identities": 4, "train_per_identity": 4, "gallery_per_identity": 2, "probe_per_identity": 2,
           "unknown_identities": 1, "image_size": 16},
  "backbone": {"image_size": 16, "patch_size": 4, "embed_dim": 8, "attn_dim": 8, "heads": 2, "depth": 2,
               "mlp_dim": 12, "feature_dim": 6},
  "injection": {"rank": 2},
  "gate": {"samples": 16},
  "train": {"epochs": 2, "warmup_epochs": 1, "initial_lr": 1e-3},
  "pretrain": {"identities": 4, "images_per_identity": 2, "epochs": 1, "warmup_epochs": 0},
  "eval": {"ranks": [1, 2]}
})";

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

struct Run {
    int code = -1;
    std::string output;
};

/// Shared workspace with a generated benchmark and calibration.
struct Workspace {
    fs::path root = fs::temp_directory_path() / ("petal_cli_" + std::to_string(::getpid()));
    fs::path config = root / "config.json";
    fs::path out = root / "run";

    Workspace()
    {
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(config) << kTinyConfig;
    }
    ~Workspace() { fs::remove_all(root); }

    Run run(const std::string& args, const fs::path& out_dir = {}) const
    {
        const fs::path log = root / "log.txt";
        const std::string cmd = std::string(PETAL_CLI_PATH) + " --config " + config.string() + " --out " +
                                (out_dir.empty() ? out : out_dir).string() + " " + args + " > " + log.string() +
                                " 2>&1";
        const int status = std::system(cmd.c_str());
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
    }

    nlohmann::json report(const fs::path& dir) const { return nlohmann::json::parse(slurp(dir / "eval_report.json")); }
};

Workspace& shared()
{
    static Workspace w;
    static const bool ready = [] {
        REQUIRE(w.run("gen-data").code == 0);
        REQUIRE(w.run("calibrate").code == 0);
        return true;
    }();
    (void)ready;
    return w;
}

} // namespace

TEST_SUITE("cli")
{
    TEST_CASE("gen-data refuses a populated directory without --force")
    {
        Workspace& w = shared();
        const Run again = w.run("gen-data");
        CHECK(again.code == 1);
        CHECK(again.output.find("--force") != std::string::npos);
        CHECK(fs::exists(w.out / "manifest.jsonl"));
        CHECK(fs::exists(w.out / "resolved_config.json"));
    }

    TEST_CASE("calibration is deterministic")
    {
        Workspace& w = shared();
        const std::string first = slurp(w.out / "calibration.txt");
        const Run r = w.run("calibrate");
        CHECK(r.code == 0);
        CHECK(r.output.find("mu") != std::string::npos);
        CHECK(slurp(w.out / "calibration.txt") == first);
    }

    TEST_CASE("a zero-epoch checkpoint evaluates like the bare backbone")
    {
        Workspace& w = shared();
        REQUIRE(w.run("evaluate").code == 0);
        const std::string bare = slurp(w.out / "eval_report.json");
        REQUIRE(w.run("finetune --epochs 0").code == 0);
        REQUIRE(w.run("evaluate --checkpoint " + (w.out / "adapters.ckpt").string()).code == 0);
        CHECK(slurp(w.out / "eval_report.json") == bare);
    }

    TEST_CASE("fine-tune then evaluate writes reports")
    {
        Workspace& w = shared();
        const Run ft = w.run("finetune --mode petalface");
        REQUIRE(ft.code == 0);
        CHECK(ft.output.find("trainable") != std::string::npos);
        const auto train = nlohmann::json::parse(slurp(w.out / "train_report.json"));
        CHECK(train.contains("loss"));
        REQUIRE(w.run("evaluate --checkpoint " + (w.out / "adapters.ckpt").string()).code == 0);
        const auto rep = w.report(w.out);
        CHECK(rep["retrieval"].contains("rank1"));
        CHECK(rep["counts"]["unknown"].get<long>() > 0);
        CHECK(fs::exists(w.out / "eval_report.txt"));
    }

    TEST_CASE("gallery as probe set gives perfect rank-1")
    {
        Workspace& w = shared();
        const fs::path cfg = w.root / "gallery.json";
        auto j = nlohmann::json::parse(kTinyConfig);
        j["eval"]["probe_split"] = "gallery";
        j["data"]["manifest"] = (w.out / "manifest.jsonl").string();
        std::ofstream(cfg) << j.dump();
        const fs::path out = w.root / "gal";
        const std::string cmd = std::string(PETAL_CLI_PATH) + " --config " + cfg.string() + " --out " +
                                out.string() + " evaluate > /dev/null 2>&1";
        REQUIRE(std::system(cmd.c_str()) == 0);
        CHECK(w.report(out)["retrieval"]["rank1"].get<double>() == 1.0);
    }

    TEST_CASE("grad-probe and param-count")
    {
        Workspace& w = shared();
        const Run g = w.run("grad-probe");
        CHECK(g.code == 0);
        CHECK(fs::exists(w.out / "grad_probe.json"));
        const Run p = w.run("param-count");
        CHECK(p.code == 0);
        CHECK(p.output.find("recommended") != std::string::npos);
    }

    TEST_CASE("exit codes and diagnostics")
    {
        Workspace& w = shared();
        const Run no_data = w.run("finetune", w.root / "empty");
        CHECK(no_data.code == 2);
        CHECK(no_data.output.find("manifest") != std::string::npos);

        fs::copy(w.out, w.root / "nocal", fs::copy_options::recursive);
        fs::remove(w.root / "nocal" / "calibration.txt");
        const Run missing_cal = w.run("finetune --mode petalface", w.root / "nocal");
        CHECK(missing_cal.code != 0);
        CHECK(missing_cal.output.find("calibrat") != std::string::npos);

        const Run bad_ckpt = w.run("evaluate --checkpoint " + w.config.string());
        CHECK(bad_ckpt.code == 2);

        const fs::path bad_cfg = w.root / "bad.json";
        std::ofstream(bad_cfg) << R"({"train": {"epoch": 3}})";
        const std::string cmd = std::string(PETAL_CLI_PATH) + " --config " + bad_cfg.string() + " param-count > " +
                                (w.root / "bad.txt").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        CHECK(WEXITSTATUS(status) == 1);
        CHECK(slurp(w.root / "bad.txt").find("train.epoch") != std::string::npos);

        CHECK(w.run("finetune --mode sideways").code == 1);
        CHECK(w.run("no-such-command").code == 1);
    }
}
