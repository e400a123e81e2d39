#include "petal/datasim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace petal {

using nlohmann::json;

std::string split_name(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::gallery: return "gallery";
    case Split::probe: return "probe";
    }
    return "?";
}

std::optional<Split> parse_split(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "gallery")
        return Split::gallery;
    if (s == "probe")
        return Split::probe;
    return std::nullopt;
}

void DegradationSpec::validate() const
{
    if (!(blur_sigma >= 0.0) || !(noise_sigma >= 0.0))
        throw ConfigError("degradation: blur_sigma and noise_sigma must be nonnegative");
    if (downscale_factor < 1)
        throw ConfigError("degradation: downscale_factor must be at least 1");
    if (jpeg_quality < 1 || jpeg_quality > 100)
        throw ConfigError("degradation: jpeg_quality must lie in [1, 100]");
    if (!(occlusion_fraction >= 0.0 && occlusion_fraction <= 1.0))
        throw ConfigError("degradation: occlusion_fraction must lie in [0, 1]");
}

std::vector<DegradationSpec> default_degradation_grid()
{
    return {
        {1.5, 2, 0.010, 60, 0.0},
        {2.0, 3, 0.015, 45, 0.0},
        {1.0, 4, 0.010, 50, 0.0},
        {2.5, 2, 0.020, 70, 0.1},
    };
}

namespace {

int reflect(int i, int n)
{
    if (n == 1)
        return 0;
    while (i < 0 || i >= n) {
        if (i < 0)
            i = -i;
        if (i >= n)
            i = 2 * n - 2 - i;
    }
    return i;
}

// Standard JPEG luminance quantization table.
constexpr int kJpegLuma[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                               14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                               18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                               49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

} // namespace

Image gaussian_blur(const Image& img, double sigma)
{
    if (sigma <= 0.0)
        return img;
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i)
        sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k)
        v /= sum;
    Image tmp = img, out = img;
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i)
                    s += k[i + r] * img.at(c, y, reflect(x + i, img.width));
                tmp.at(c, y, x) = static_cast<float>(s);
            }
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i)
                    s += k[i + r] * tmp.at(c, reflect(y + i, img.height), x);
                out.at(c, y, x) = static_cast<float>(s);
            }
    }
    return out;
}

Image resample_down_up(const Image& img, int factor)
{
    if (factor <= 1)
        return img;
    const int lw = (img.width + factor - 1) / factor, lh = (img.height + factor - 1) / factor;
    Image low(lw, lh, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < lh; ++y)
            for (int x = 0; x < lw; ++x) {
                double s = 0.0;
                int n = 0;
                for (int yy = y * factor; yy < std::min((y + 1) * factor, img.height); ++yy)
                    for (int xx = x * factor; xx < std::min((x + 1) * factor, img.width); ++xx, ++n)
                        s += img.at(c, yy, xx);
                low.at(c, y, x) = static_cast<float>(s / n);
            }
    Image out(img.width, img.height, img.channels);
    out.annotated_quality = img.annotated_quality;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y) {
            const double sy = std::clamp((y + 0.5) / factor - 0.5, 0.0, lh - 1.0);
            const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, lh - 1);
            const double fy = sy - y0;
            for (int x = 0; x < img.width; ++x) {
                const double sx = std::clamp((x + 0.5) / factor - 0.5, 0.0, lw - 1.0);
                const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, lw - 1);
                const double fx = sx - x0;
                const double top = (1 - fx) * low.at(c, y0, x0) + fx * low.at(c, y0, x1);
                const double bot = (1 - fx) * low.at(c, y1, x0) + fx * low.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    return out;
}

Image jpeg_like(const Image& img, int quality)
{
    if (quality >= 100)
        return img;
    const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
    double step[64];
    for (int i = 0; i < 64; ++i)
        step[i] = std::max(1.0, std::floor((kJpegLuma[i] * scale + 50.0) / 100.0));
    double basis[8][8];
    for (int u = 0; u < 8; ++u)
        for (int x = 0; x < 8; ++x)
            basis[u][x] = (u == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8)) * std::cos((2 * x + 1) * u * std::numbers::pi / 16);

    Image out = img;
    for (int c = 0; c < img.channels; ++c)
        for (int by = 0; by < img.height; by += 8)
            for (int bx = 0; bx < img.width; bx += 8) {
                double blk[8][8], coef[8][8], tmp[8][8];
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        blk[y][x] = 255.0 * img.at(c, std::min(by + y, img.height - 1), std::min(bx + x, img.width - 1)) - 128.0;
                for (int u = 0; u < 8; ++u)
                    for (int x = 0; x < 8; ++x) {
                        double s = 0.0;
                        for (int y = 0; y < 8; ++y)
                            s += basis[u][y] * blk[y][x];
                        tmp[u][x] = s;
                    }
                for (int u = 0; u < 8; ++u)
                    for (int v = 0; v < 8; ++v) {
                        double s = 0.0;
                        for (int x = 0; x < 8; ++x)
                            s += tmp[u][x] * basis[v][x];
                        coef[u][v] = std::round(s / step[u * 8 + v]) * step[u * 8 + v];
                    }
                for (int y = 0; y < 8; ++y)
                    for (int v = 0; v < 8; ++v) {
                        double s = 0.0;
                        for (int u = 0; u < 8; ++u)
                            s += basis[u][y] * coef[u][v];
                        tmp[y][v] = s;
                    }
                for (int y = 0; y < 8 && by + y < img.height; ++y)
                    for (int x = 0; x < 8 && bx + x < img.width; ++x) {
                        double s = 0.0;
                        for (int v = 0; v < 8; ++v)
                            s += tmp[y][v] * basis[v][x];
                        out.at(c, by + y, bx + x) = static_cast<float>(std::clamp((s + 128.0) / 255.0, 0.0, 1.0));
                    }
            }
    return out;
}

Image degrade(const Image& img, const DegradationSpec& spec, std::uint64_t seed)
{
    spec.validate();
    if (spec.is_identity())
        return img;
    Rng rng(seed);
    Image out = img;
    if (spec.occlusion_fraction > 0.0) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double area = spec.occlusion_fraction * out.width * out.height;
        const double aspect = 0.5 + u(rng);
        const int w = std::clamp(static_cast<int>(std::round(std::sqrt(area * aspect))), 1, out.width);
        const int h = std::clamp(static_cast<int>(std::round(area / w)), 1, out.height);
        const int x0 = static_cast<int>(u(rng) * (out.width - w + 1));
        const int y0 = static_cast<int>(u(rng) * (out.height - h + 1));
        const auto fill = static_cast<float>(0.1 + 0.8 * u(rng));
        for (int c = 0; c < out.channels; ++c)
            for (int y = y0; y < std::min(y0 + h, out.height); ++y)
                for (int x = x0; x < std::min(x0 + w, out.width); ++x)
                    out.at(c, y, x) = fill;
    }
    out = gaussian_blur(out, spec.blur_sigma);
    out = resample_down_up(out, spec.downscale_factor);
    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> n(0.0, spec.noise_sigma);
        for (float& v : out.data)
            v = static_cast<float>(std::clamp(v + n(rng), 0.0, 1.0));
    }
    out = jpeg_like(out, spec.jpeg_quality);
    out.annotated_quality = img.annotated_quality;
    return out;
}

void BenchmarkSpec::validate() const
{
    if (n_identities < 2)
        throw ConfigError("benchmark: n_identities must be at least 2");
    if (train_per_identity < 0 || gallery_per_identity < 0 || probe_per_identity < 0 || unknown_identities < 0)
        throw ConfigError("benchmark: per-identity counts must be nonnegative");
    if (degradation_grid.empty())
        throw ConfigError("benchmark: degradation grid is empty");
    for (const auto& d : degradation_grid)
        d.validate();
    if (!(train_degraded_fraction >= 0.0 && train_degraded_fraction <= 1.0))
        throw ConfigError("benchmark: train_degraded_fraction must lie in [0, 1]");
    if (image_size < 16)
        throw ConfigError("benchmark: image_size must be at least 16");
    if (channels != 1 && channels != 3)
        throw ConfigError("benchmark: channels must be 1 or 3");
    if (!(identity_spread > 0.0))
        throw ConfigError("benchmark: identity_spread must be positive");
}

std::string identity_label(int id)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "id%05d", id);
    return buf;
}

std::uint64_t sample_key(Split split, int index)
{
    return (static_cast<std::uint64_t>(split) + 1) * 1000003ULL + static_cast<std::uint64_t>(index);
}

namespace {

struct FaceParams {
    double rx, ry, skin, bg, hair_h, hair;
    double eye_dy, eye_dx, eye_r, eye;
    double brow_gap, brow_t, brow_len, brow_tilt, brow;
    double nose_len, nose_w, nose;
    double mouth_dy, mouth_w, mouth_t, mouth_curve, mouth;
    double tex_amp[2], tex_freq[2], tex_theta[2], tex_phase[2];
    double cheek[2];
    double tint[3];
};

FaceParams identity_params(const BenchmarkSpec& spec, int identity)
{
    Rng rng(derive_seed(derive_seed(spec.seed, "identity"), static_cast<std::uint64_t>(identity)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double s = spec.identity_spread;
    auto p = [&](double mid, double width) { return mid + s * (u(rng) - 0.5) * width; };
    FaceParams f{};
    f.rx = p(20, 6);
    f.ry = p(25, 6);
    f.skin = p(0.62, 0.24);
    f.bg = p(0.2, 0.2);
    f.hair_h = p(8, 8);
    f.hair = p(0.25, 0.3);
    f.eye_dy = p(-7, 5);
    f.eye_dx = p(8, 5);
    f.eye_r = p(3, 2);
    f.eye = p(0.12, 0.2);
    f.brow_gap = p(5, 3);
    f.brow_t = p(1.5, 1.4);
    f.brow_len = p(6, 4);
    f.brow_tilt = p(0, 0.6);
    f.brow = p(0.3, 0.3);
    f.nose_len = p(7, 6);
    f.nose_w = p(2, 2);
    f.nose = p(-0.15, 0.2);
    f.mouth_dy = p(11, 5);
    f.mouth_w = p(6, 5);
    f.mouth_t = p(1.8, 1.6);
    f.mouth_curve = p(0, 4);
    f.mouth = p(0.3, 0.3);
    for (int i = 0; i < 2; ++i) {
        f.tex_amp[i] = p(0.05, 0.06);
        f.tex_freq[i] = p(0.55, 0.6);
        f.tex_theta[i] = u(rng) * std::numbers::pi;
        f.tex_phase[i] = u(rng) * 2 * std::numbers::pi;
        f.cheek[i] = p(0.0, 0.16);
    }
    for (double& t : f.tint)
        t = p(1.0, 0.4);
    return f;
}

double coverage(double signed_dist) { return std::clamp(0.5 - signed_dist, 0.0, 1.0); }

double ellipse_sd(double x, double y, double cx, double cy, double rx, double ry)
{
    const double nx = (x - cx) / rx, ny = (y - cy) / ry;
    const double r = std::sqrt(nx * nx + ny * ny);
    return (r - 1.0) * std::min(rx, ry);
}

double segment_sd(double x, double y, double ax, double ay, double bx, double by, double half_thickness)
{
    const double px = x - ax, py = y - ay, dx = bx - ax, dy = by - ay;
    const double t = std::clamp((px * dx + py * dy) / std::max(1e-12, dx * dx + dy * dy), 0.0, 1.0);
    const double ex = px - t * dx, ey = py - t * dy;
    return std::sqrt(ex * ex + ey * ey) - half_thickness;
}

} // namespace

Image render_identity(const BenchmarkSpec& spec, int identity, std::uint64_t key)
{
    const FaceParams f = identity_params(spec, identity);
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(identity), key));
    std::normal_distribution<double> n(0.0, 1.0);
    const int S = spec.image_size;
    const double k = S / 64.0;
    const double cx = S / 2.0 + 1.0 * k * n(rng);
    const double cy = S / 2.0 + 2.0 * k + 1.0 * k * n(rng);
    const double brightness = 0.04 * n(rng);
    const double contrast = 1.0 + 0.06 * n(rng);
    const double mouth_w = f.mouth_w * (1.0 + 0.08 * n(rng));
    const double tilt = 0.04 * n(rng);
    const double ct = std::cos(tilt), st = std::sin(tilt);

    Image img(S, S, spec.channels);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            // face-local coordinates in 64-pixel units, with a small in-plane tilt
            const double ux = ((x + 0.5 - cx) * ct + (y + 0.5 - cy) * st) / k;
            const double uy = (-(x + 0.5 - cx) * st + (y + 0.5 - cy) * ct) / k;
            double v = f.bg + 0.05 * (uy / 32.0);

            const double face = coverage(ellipse_sd(ux, uy, 0, 0, f.rx, f.ry) * k);
            double skin = f.skin;
            for (int i = 0; i < 2; ++i)
                skin += f.tex_amp[i] * std::sin(f.tex_freq[i] * (ux * std::cos(f.tex_theta[i]) + uy * std::sin(f.tex_theta[i])) +
                                                f.tex_phase[i]);
            for (int side = 0; side < 2; ++side) {
                const double sx = side == 0 ? -1.0 : 1.0;
                const double dx = ux - sx * (f.eye_dx + 3.0), dy = uy - (f.eye_dy + 6.0);
                skin += f.cheek[side] * std::exp(-(dx * dx + dy * dy) / 18.0);
            }
            v = v * (1 - face) + skin * face;

            const double hair = coverage((uy - (-f.ry + f.hair_h)) * k) * coverage(ellipse_sd(ux, uy, 0, -1.5, f.rx + 2, f.ry + 1.5) * k);
            v = v * (1 - hair) + f.hair * hair;

            for (int side = 0; side < 2; ++side) {
                const double sx = side == 0 ? -1.0 : 1.0;
                const double ex = sx * f.eye_dx;
                const double eye = coverage(ellipse_sd(ux, uy, ex, f.eye_dy, f.eye_r * 1.3, f.eye_r) * k);
                v = v * (1 - eye) + f.eye * eye;
                const double by = f.eye_dy - f.brow_gap;
                const double half = f.brow_len / 2;
                const double brow = coverage(
                    segment_sd(ux, uy, ex - half, by + sx * f.brow_tilt * half, ex + half, by - sx * f.brow_tilt * half, f.brow_t / 2) * k);
                v = v * (1 - brow) + f.brow * brow;
            }
            const double nose = coverage(segment_sd(ux, uy, 0, f.eye_dy + 2, 0, f.eye_dy + 2 + f.nose_len, f.nose_w / 2) * k);
            v = v * (1 - nose) + (f.skin + f.nose) * nose;

            const double my = f.mouth_dy + f.mouth_curve * (1.0 - (ux / std::max(1.0, mouth_w)) * (ux / std::max(1.0, mouth_w)));
            const double mouth = std::abs(ux) <= mouth_w ? coverage((std::abs(uy - my) - f.mouth_t / 2) * k) : 0.0;
            v = v * (1 - mouth) + f.mouth * mouth;

            v = (v - 0.5) * contrast + 0.5 + brightness;
            for (int c = 0; c < spec.channels; ++c)
                img.at(c, y, x) = static_cast<float>(spec.channels == 1 ? v : v * f.tint[c]);
        }
    quantize_8bit(img);
    return img;
}

namespace {

std::vector<int> histogram10(const std::vector<double>& xs)
{
    std::vector<int> h(10, 0);
    for (double x : xs)
        ++h[std::clamp(static_cast<int>(x * 10.0), 0, 9)];
    return h;
}

double mean_of(const std::vector<double>& xs)
{
    if (xs.empty())
        return 0.0;
    double s = 0.0;
    for (double x : xs)
        s += x;
    return s / static_cast<double>(xs.size());
}

} // namespace

GeneratedBenchmark generate_benchmark(const BenchmarkSpec& spec)
{
    spec.validate();
    GeneratedBenchmark out;
    const int G = static_cast<int>(spec.degradation_grid.size());
    auto add = [&](int id, Split split, int index, std::optional<int> grid) {
        const std::uint64_t key = sample_key(split, index);
        Image img = render_identity(spec, id, key);
        if (grid) {
            img = degrade(img, spec.degradation_grid[*grid],
                          derive_seed(spec.seed, static_cast<std::uint64_t>(id), key ^ 0xde9ade5ULL));
            quantize_8bit(img);
        }
        ManifestRecord r;
        r.identity = identity_label(id);
        r.split = split;
        r.path = "images/" + split_name(split) + "/" + r.identity + "/" + split_name(split) + "_" +
                 std::to_string(index) + ".png";
        r.degradation = grid;
        out.manifest.records.push_back(std::move(r));
        out.images.push_back(std::move(img));
    };

    for (int i = 0; i < spec.n_identities; ++i) {
        const int id = spec.first_identity + i;
        for (int j = 0; j < spec.train_per_identity; ++j) {
            const bool degraded = std::floor((j + 1) * spec.train_degraded_fraction) > std::floor(j * spec.train_degraded_fraction);
            add(id, Split::train, j, degraded ? std::optional<int>((j + id) % G) : std::nullopt);
        }
        for (int j = 0; j < spec.gallery_per_identity; ++j)
            add(id, Split::gallery, j, std::nullopt);
        for (int j = 0; j < spec.probe_per_identity; ++j)
            add(id, Split::probe, j, (j + id) % G);
    }
    for (int i = 0; i < spec.unknown_identities; ++i) {
        const int id = spec.first_identity + spec.n_identities + i;
        for (int j = 0; j < spec.probe_per_identity; ++j)
            add(id, Split::probe, j, (j + id) % G);
    }

    const auto est = builtin_sharpness_estimator();
    std::vector<double> gal, prb, trn;
    for (std::size_t i = 0; i < out.images.size(); ++i) {
        const double q = est->score(out.images[i]);
        switch (out.manifest.records[i].split) {
        case Split::gallery: gal.push_back(q); break;
        case Split::probe: prb.push_back(q); break;
        case Split::train: trn.push_back(q); break;
        }
    }
    out.quality.gallery_mean = mean_of(gal);
    out.quality.probe_mean = mean_of(prb);
    out.quality.train_mean = mean_of(trn);
    out.quality.gallery_histogram = histogram10(gal);
    out.quality.probe_histogram = histogram10(prb);
    return out;
}

void write_benchmark(const GeneratedBenchmark& bench, const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < bench.images.size(); ++i) {
        const fs::path p = dir / bench.manifest.records[i].path;
        fs::create_directories(p.parent_path());
        write_png(bench.images[i], p);
    }
    write_manifest(bench.manifest, dir / "manifest.jsonl");
}

std::vector<std::string> DatasetManifest::identities(std::optional<Split> split) const
{
    std::set<std::string> ids;
    for (const auto& r : records)
        if (!split || r.split == *split)
            ids.insert(r.identity);
    return {ids.begin(), ids.end()};
}

std::size_t DatasetManifest::count(Split split) const
{
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

void DatasetManifest::check_closed_set() const
{
    const auto gallery = identities(Split::gallery);
    const std::set<std::string> g(gallery.begin(), gallery.end());
    for (const auto& id : identities(Split::probe))
        if (!g.contains(id))
            throw ManifestError("probe identity '" + id + "' has no gallery images (closed-set protocol)");
}

std::string manifest_to_jsonl(const DatasetManifest& m)
{
    std::ostringstream os;
    os << json{{"format", kManifestFormat}}.dump() << '\n';
    for (const auto& r : m.records) {
        json j{{"path", r.path}, {"identity", r.identity}, {"split", split_name(r.split)}};
        if (r.degradation)
            j["degradation"] = *r.degradation;
        if (r.quality)
            j["quality"] = *r.quality;
        os << j.dump() << '\n';
    }
    return os.str();
}

DatasetManifest manifest_from_jsonl(const std::string& text)
{
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    bool header = false;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty())
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!header) {
            if (!j.contains("format") || j["format"] != kManifestFormat)
                throw ManifestError(std::string("manifest: first line must declare format ") + kManifestFormat);
            header = true;
            continue;
        }
        try {
            ManifestRecord r;
            r.path = j.at("path").get<std::string>();
            r.identity = j.at("identity").get<std::string>();
            const auto s = parse_split(j.at("split").get<std::string>());
            if (!s)
                throw ManifestError("manifest line " + std::to_string(lineno) + ": unknown split");
            r.split = *s;
            if (j.contains("degradation"))
                r.degradation = j["degradation"].get<int>();
            if (j.contains("quality"))
                r.quality = j["quality"].get<double>();
            for (const auto& [key, _] : j.items())
                if (key != "path" && key != "identity" && key != "split" && key != "degradation" && key != "quality")
                    throw ManifestError("manifest line " + std::to_string(lineno) + ": unknown field '" + key + "'");
            m.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!header)
        throw ManifestError("manifest is empty");
    return m;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot write manifest '" + path.string() + "'");
    os << manifest_to_jsonl(m);
}

DatasetManifest read_manifest(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot read manifest '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return manifest_from_jsonl(ss.str());
}

IngestResult ingest_folder(const std::filesystem::path& root, bool closed_set)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw ManifestError("ingest: '" + root.string() + "' is not a directory");
    IngestResult res;
    auto sorted_entries = [](const fs::path& dir) {
        std::vector<fs::directory_entry> v(fs::directory_iterator(dir), fs::directory_iterator{});
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.path() < b.path(); });
        return v;
    };
    for (const auto& split_dir : sorted_entries(root)) {
        if (!split_dir.is_directory())
            continue;
        const auto split = parse_split(split_dir.path().filename().string());
        if (!split) {
            res.errors.push_back({split_dir.path().string(), "unknown split directory"});
            continue;
        }
        for (const auto& id_dir : sorted_entries(split_dir.path())) {
            if (!id_dir.is_directory()) {
                res.errors.push_back({id_dir.path().string(), "expected an identity directory"});
                continue;
            }
            for (const auto& file : sorted_entries(id_dir.path())) {
                if (!file.is_regular_file())
                    continue;
                const std::string rel = fs::relative(file.path(), root).generic_string();
                if (file.path().extension() != ".png") {
                    res.errors.push_back({rel, "unsupported file type"});
                    continue;
                }
                try {
                    (void)read_png(file.path());
                } catch (const Error& e) {
                    res.errors.push_back({rel, e.what()});
                    continue;
                }
                ManifestRecord r;
                r.path = rel;
                r.identity = id_dir.path().filename().string();
                r.split = *split;
                res.manifest.records.push_back(std::move(r));
            }
        }
    }
    if (res.manifest.records.empty())
        throw ManifestError("ingest: no readable images under '" + root.string() + "'");
    if (closed_set)
        res.manifest.check_closed_set();
    return res;
}

namespace {

LabeledImages label_records(const DatasetManifest& m, Split split)
{
    LabeledImages out;
    out.identities = m.identities(split);
    return out;
}

int class_of(const LabeledImages& li, const std::string& identity)
{
    auto it = std::lower_bound(li.identities.begin(), li.identities.end(), identity);
    return static_cast<int>(it - li.identities.begin());
}

} // namespace

LabeledImages collect_split(const DatasetManifest& m, const std::vector<Image>& images, Split split)
{
    if (images.size() != m.records.size())
        throw DimensionError("collect_split: image count does not match manifest");
    LabeledImages out = label_records(m, split);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (r.split != split)
            continue;
        Image img = images[i];
        if (r.quality)
            img.annotated_quality = r.quality;
        out.images.push_back(std::move(img));
        out.labels.push_back(class_of(out, r.identity));
        out.paths.push_back(r.path);
    }
    return out;
}

LabeledImages load_split(const DatasetManifest& m, const std::filesystem::path& base, Split split,
                         std::vector<RecordError>* errors, bool load_pixels)
{
    LabeledImages out = label_records(m, split);
    for (const auto& r : m.records) {
        if (r.split != split)
            continue;
        Image img;
        if (load_pixels) {
            try {
                img = read_png(base / r.path);
            } catch (const Error& e) {
                if (errors == nullptr)
                    throw;
                errors->push_back({r.path, e.what()});
                continue;
            }
        }
        img.annotated_quality = r.quality;
        out.images.push_back(std::move(img));
        out.labels.push_back(class_of(out, r.identity));
        out.paths.push_back(r.path);
    }
    return out;
}

} // namespace petal
