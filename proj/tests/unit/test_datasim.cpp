#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "petal/datasim.hpp"

using namespace petal;
namespace fs = std::filesystem;

namespace {

BenchmarkSpec small_spec()
{
    BenchmarkSpec s;
    s.n_identities = 4;
    s.train_per_identity = 3;
    s.gallery_per_identity = 2;
    s.probe_per_identity = 2;
    s.unknown_identities = 1;
    s.image_size = 32;
    s.seed = 21;
    return s;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("petal_unit_" + tag + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_SUITE("datasim")
{
    TEST_CASE("generation is deterministic and sized as configured")
    {
        const auto a = generate_benchmark(small_spec());
        const auto b = generate_benchmark(small_spec());
        REQUIRE(a.images.size() == b.images.size());
        for (std::size_t i = 0; i < a.images.size(); ++i)
            CHECK(a.images[i].same_pixels(b.images[i]));
        CHECK(a.manifest == b.manifest);
        CHECK(a.manifest.count(Split::train) == 12);
        CHECK(a.manifest.count(Split::gallery) == 8);
        CHECK(a.manifest.count(Split::probe) == 10);
        CHECK(a.manifest.identities(Split::gallery).size() == 4);
        CHECK(a.manifest.identities(Split::probe).size() == 5);
        BenchmarkSpec other = small_spec();
        other.seed = 22;
        CHECK_FALSE(generate_benchmark(other).images[0].same_pixels(a.images[0]));
    }

    TEST_CASE("gallery is clean and probes are degraded")
    {
        BenchmarkSpec s = small_spec();
        s.image_size = 64;
        const auto b = generate_benchmark(s);
        CHECK(b.quality.gallery_mean > b.quality.probe_mean);
        for (const auto& r : b.manifest.records)
            if (r.split == Split::gallery)
                CHECK_FALSE(r.degradation.has_value());
            else if (r.split == Split::probe)
                CHECK(r.degradation.has_value());
    }

    TEST_CASE("first_identity offsets labels")
    {
        BenchmarkSpec s = small_spec();
        s.first_identity = 100;
        const auto ids = generate_benchmark(s).manifest.identities(Split::gallery);
        CHECK(ids.front() == identity_label(100));
    }

    TEST_CASE("degradations")
    {
        const Image img = render_identity(small_spec(), 0, sample_key(Split::train, 0));
        CHECK(degrade(img, DegradationSpec{}, 1).same_pixels(img));
        DegradationSpec d;
        d.noise_sigma = 0.05;
        CHECK(degrade(img, d, 1).same_pixels(degrade(img, d, 1)));
        CHECK_FALSE(degrade(img, d, 1).same_pixels(degrade(img, d, 2)));
        const Image low = resample_down_up(img, 4);
        CHECK(low.width == img.width);
        for (float v : jpeg_like(img, 10).data)
            CHECK((v >= 0.0f && v <= 1.0f));
        DegradationSpec bad;
        bad.jpeg_quality = 0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        BenchmarkSpec tiny = small_spec();
        tiny.image_size = 8;
        CHECK_THROWS_AS(tiny.validate(), ConfigError);
    }

    TEST_CASE("manifest JSON lines round trip and strictness")
    {
        DatasetManifest m;
        m.records.push_back({"train/a/0.png", "a", Split::train, 3, 0.25});
        m.records.push_back({"gallery/a/0.png", "a", Split::gallery, std::nullopt, std::nullopt});
        CHECK(manifest_from_jsonl(manifest_to_jsonl(m)) == m);
        const std::string header = std::string("{\"format\":\"") + kManifestFormat + "\"}\n";
        CHECK_THROWS_AS(manifest_from_jsonl(""), ManifestError);
        CHECK_THROWS_AS(manifest_from_jsonl("{\"path\":\"x\",\"identity\":\"a\",\"split\":\"train\"}\n"),
                        ManifestError);
        CHECK_THROWS_AS(manifest_from_jsonl(header + "{\"path\":\"x\",\"identity\":\"a\",\"split\":\"train\",\"pose\":1}\n"),
                        ManifestError);
        CHECK_THROWS_AS(manifest_from_jsonl(header + "{\"path\":\"x\",\"identity\":\"a\",\"split\":\"dev\"}\n"),
                        ManifestError);
        CHECK_THROWS_AS(manifest_from_jsonl(header + "{\"path\":\"x\",\"split\":\"train\"}\n"), ManifestError);
        CHECK_THROWS_AS(manifest_from_jsonl(header + "not json\n"), ManifestError);
    }

    TEST_CASE("closed-set check")
    {
        DatasetManifest m;
        m.records.push_back({"g.png", "a", Split::gallery, {}, {}});
        m.records.push_back({"p.png", "a", Split::probe, {}, {}});
        CHECK_NOTHROW(m.check_closed_set());
        m.records.push_back({"q.png", "b", Split::probe, {}, {}});
        CHECK_THROWS_AS(m.check_closed_set(), ManifestError);
    }

    TEST_CASE("written benchmark loads back pixel-exact")
    {
        TempDir dir("bench");
        const auto b = generate_benchmark(small_spec());
        write_benchmark(b, dir.path);
        const DatasetManifest m = read_manifest(dir.path / "manifest.jsonl");
        CHECK(m == b.manifest);
        const LabeledImages mem = collect_split(b.manifest, b.images, Split::gallery);
        const LabeledImages disk = load_split(m, dir.path, Split::gallery);
        REQUIRE(disk.size() == mem.size());
        CHECK(disk.labels == mem.labels);
        CHECK(disk.identities == mem.identities);
        for (std::size_t i = 0; i < disk.size(); ++i)
            CHECK(disk.images[i].same_pixels(mem.images[i]));
    }

    TEST_CASE("load_split reports unreadable files when asked")
    {
        TempDir dir("broken");
        const auto b = generate_benchmark(small_spec());
        write_benchmark(b, dir.path);
        const DatasetManifest m = read_manifest(dir.path / "manifest.jsonl");
        std::string victim;
        for (const auto& r : m.records)
            if (r.split == Split::train) {
                victim = r.path;
                break;
            }
        std::ofstream(dir.path / victim, std::ios::trunc) << "garbage";
        CHECK_THROWS(load_split(m, dir.path, Split::train));
        std::vector<RecordError> errors;
        const LabeledImages s = load_split(m, dir.path, Split::train, &errors);
        REQUIRE(errors.size() == 1);
        CHECK(errors[0].path == victim);
        CHECK(s.size() == m.count(Split::train) - 1);
    }

    TEST_CASE("folder ingestion")
    {
        TempDir dir("ingest");
        const Image img = render_identity(small_spec(), 0, 1);
        for (const char* split : {"gallery", "probe"})
            for (const char* id : {"alice", "bob"}) {
                fs::create_directories(dir.path / split / id);
                write_png(img, dir.path / split / id / "0.png");
            }
        std::ofstream(dir.path / "gallery" / "bob" / "notes.txt") << "x";
        fs::create_directories(dir.path / "extra");
        const IngestResult r = ingest_folder(dir.path);
        CHECK(r.manifest.count(Split::gallery) == 2);
        CHECK(r.manifest.count(Split::probe) == 2);
        CHECK(r.errors.size() == 2);
        CHECK_THROWS_AS(ingest_folder(dir.path / "missing"), ManifestError);
    }
}
