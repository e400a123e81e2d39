#include "petal/quality.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <vector>

namespace petal {

double QualityEstimator::score(const Image& img) const
{
    const double raw = raw_score(img);
    if (!std::isfinite(raw))
        throw GatingError(name() + ": non-finite quality score");
    const auto [lo, hi] = nominal_range();
    return std::clamp((raw - lo) / (hi - lo), 0.0, 1.0);
}

namespace {

// Constants of the built-in estimator, in 8-bit intensity units.
// kSharpHalf: Laplacian variance that squashes to 0.5.
// kNoiseScale: low-half mean |Laplacian| at which the noise factor is 0.5.
// kBlockScale: excess step across 8-pixel block seams at which the blocking factor is 0.5.
constexpr double kSharpHalf = 500.0;
constexpr double kNoiseScale = 4.0;
constexpr double kBlockScale = 2.0;
constexpr int kBlock = 8;

class SharpnessEstimator final : public QualityEstimator {
public:
    std::string name() const override { return "sharpness"; }
    std::pair<double, double> nominal_range() const override { return {0.0, 1.0}; }

    double raw_score(const Image& img) const override
    {
        if (img.empty() || img.width < 3 || img.height < 3)
            throw InputError("sharpness estimator needs an image of at least 3x3 pixels");
        const Image g = to_gray(img);
        const int w = g.width, h = g.height;
        std::vector<double> lap;
        lap.reserve(static_cast<std::size_t>(w - 2) * (h - 2));
        for (int y = 1; y < h - 1; ++y)
            for (int x = 1; x < w - 1; ++x) {
                const double v = g.at(0, y - 1, x) + g.at(0, y + 1, x) + g.at(0, y, x - 1) + g.at(0, y, x + 1) -
                                 4.0 * g.at(0, y, x);
                lap.push_back(255.0 * v);
            }
        const double n = static_cast<double>(lap.size());
        const double mean = std::accumulate(lap.begin(), lap.end(), 0.0) / n;
        double var = 0.0;
        for (double v : lap)
            var += (v - mean) * (v - mean);
        var /= n;
        if (var <= 0.0)
            return 0.0;

        // Noise floor: mean of the smaller half of |Laplacian|. Edges live in
        // the upper half, so this tracks broadband noise rather than structure.
        std::vector<double> mag(lap.size());
        std::transform(lap.begin(), lap.end(), mag.begin(), [](double v) { return std::abs(v); });
        const std::size_t half = mag.size() / 2;
        std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(half), mag.end());
        const double floor = half ? std::accumulate(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(half), 0.0) / half : 0.0;

        // Blocking: mean absolute step across block seams minus elsewhere.
        double seam = 0.0, inner = 0.0;
        long n_seam = 0, n_inner = 0;
        auto step = [&](double d, bool at_seam) {
            if (at_seam) {
                seam += d;
                ++n_seam;
            } else {
                inner += d;
                ++n_inner;
            }
        };
        for (int y = 0; y < h; ++y)
            for (int x = 0; x + 1 < w; ++x)
                step(255.0 * std::abs(g.at(0, y, x + 1) - g.at(0, y, x)), x % kBlock == kBlock - 1);
        for (int y = 0; y + 1 < h; ++y)
            for (int x = 0; x < w; ++x)
                step(255.0 * std::abs(g.at(0, y + 1, x) - g.at(0, y, x)), y % kBlock == kBlock - 1);
        const double blocking = (n_seam && n_inner) ? std::max(0.0, seam / n_seam - inner / n_inner) : 0.0;

        const double sharp = var / (var + kSharpHalf);
        const double noise_factor = 1.0 / (1.0 + (floor / kNoiseScale) * (floor / kNoiseScale));
        const double block_factor = 1.0 / (1.0 + blocking / kBlockScale);
        return std::clamp(sharp * noise_factor * block_factor, 0.0, 1.0);
    }
};

class PrecomputedEstimator final : public QualityEstimator {
public:
    PrecomputedEstimator(double lo, double hi) : lo_(lo), hi_(hi)
    {
        if (!(hi > lo))
            throw ConfigError("precomputed estimator: nominal range must satisfy low < high");
    }
    std::string name() const override { return "precomputed"; }
    std::pair<double, double> nominal_range() const override { return {lo_, hi_}; }
    bool needs_pixels() const override { return false; }

    double raw_score(const Image& img) const override
    {
        if (!img.annotated_quality)
            throw InputError("precomputed estimator: record carries no quality annotation");
        return *img.annotated_quality;
    }

private:
    double lo_, hi_;
};

std::string fmt_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::shared_ptr<const QualityEstimator> builtin_sharpness_estimator()
{
    static const auto instance = std::make_shared<const SharpnessEstimator>();
    return instance;
}

std::shared_ptr<const QualityEstimator> precomputed_estimator(double low, double high)
{
    return std::make_shared<const PrecomputedEstimator>(low, high);
}

std::shared_ptr<const QualityEstimator> make_estimator(const std::string& name, std::pair<double, double> range)
{
    if (name == "sharpness")
        return builtin_sharpness_estimator();
    if (name == "precomputed")
        return precomputed_estimator(range.first, range.second);
    throw ConfigError("unknown quality estimator '" + name + "'");
}

GateCalibration calibrate_from_scores(const std::function<double(std::size_t)>& score_at, std::size_t n, int l,
                                      std::uint64_t seed, std::string estimator_name)
{
    if (n == 0)
        throw InputError("calibration needs a non-empty dataset");
    if (l < 1)
        throw ConfigError("calibration sample count must be at least 1");

    Rng rng(derive_seed(seed, "calibration"));
    std::vector<std::size_t> picks;
    const auto want = static_cast<std::size_t>(l);
    if (want <= n) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < want; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        idx.resize(want);
        picks = std::move(idx);
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (std::size_t i = 0; i < want; ++i)
            picks.push_back(pick(rng));
    }

    std::vector<double> scores;
    scores.reserve(picks.size());
    for (std::size_t i : picks) {
        const double s = score_at(i);
        if (!std::isfinite(s))
            throw GatingError("non-finite quality score during calibration");
        scores.push_back(s);
    }
    const double count = static_cast<double>(scores.size());
    const double mu = std::accumulate(scores.begin(), scores.end(), 0.0) / count;
    double ss = 0.0;
    for (double s : scores)
        ss += (s - mu) * (s - mu);
    GateCalibration c;
    c.mu = mu;
    c.sigma = std::sqrt(ss / count);
    c.threshold = c.mu + c.sigma;
    c.sample_count = l;
    c.estimator_name = std::move(estimator_name);
    c.seed = seed;
    return c;
}

GateCalibration calibrate_gate(const QualityEstimator& estimator, std::span<const Image> dataset, int l,
                               std::uint64_t seed)
{
    // Memoized: sampling with replacement revisits images.
    std::map<std::size_t, double> cache;
    auto at = [&](std::size_t i) {
        auto it = cache.find(i);
        if (it != cache.end())
            return it->second;
        const double s = estimator.score(dataset[i]);
        cache.emplace(i, s);
        return s;
    };
    return calibrate_from_scores(at, dataset.size(), l, seed, estimator.name());
}

Eigen::VectorXd alpha_from_quality(const Eigen::VectorXd& q, const GateCalibration& calib)
{
    Eigen::VectorXd a(q.size());
    for (Eigen::Index i = 0; i < q.size(); ++i) {
        if (!std::isfinite(q(i)))
            throw GatingError("non-finite quality score");
        a(i) = std::clamp(raw_alpha(q(i), calib.threshold), 0.0, 1.0);
    }
    return a;
}

Eigen::VectorXd QualityGate::scores(std::span<const Image> images) const
{
    if (!estimator)
        throw StateError("quality gate has no estimator");
    Eigen::VectorXd q(static_cast<Eigen::Index>(images.size()));
    for (std::size_t i = 0; i < images.size(); ++i)
        q(static_cast<Eigen::Index>(i)) = estimator->score(images[i]);
    return q;
}

Eigen::VectorXd QualityGate::alpha(std::span<const Image> images) const
{
    if (!calibration)
        throw StateError("quality gate is not calibrated");
    return alpha_from_quality(scores(images), *calibration);
}

std::string format_calibration(const GateCalibration& c)
{
    std::ostringstream os;
    os << "mu=" << fmt_double(c.mu) << '\n'
       << "sigma=" << fmt_double(c.sigma) << '\n'
       << "threshold=" << fmt_double(c.threshold) << '\n'
       << "l=" << c.sample_count << '\n'
       << "estimator=" << c.estimator_name << '\n'
       << "seed=" << c.seed << '\n';
    return os.str();
}

GateCalibration parse_calibration(const std::string& text)
{
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw CorruptionError("calibration record: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end())
            throw CorruptionError(std::string("calibration record: missing key '") + key + "'");
        return it->second;
    };
    GateCalibration c;
    try {
        c.mu = std::stod(get("mu"));
        c.sigma = std::stod(get("sigma"));
        c.threshold = std::stod(get("threshold"));
        c.sample_count = std::stoi(get("l"));
        c.estimator_name = get("estimator");
        c.seed = std::stoull(get("seed"));
    } catch (const std::logic_error&) {
        throw CorruptionError("calibration record: unparsable value");
    }
    return c;
}

void write_calibration(const GateCalibration& c, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot write calibration file '" + path.string() + "'");
    os << format_calibration(c);
}

GateCalibration read_calibration(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot read calibration file '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_calibration(ss.str());
}

} // namespace petal
