#include "petal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace petal {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const std::string& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string tensor_bytes(const std::vector<Tensor>& tensors)
{
    std::string out;
    for (const Tensor& t : tensors) {
        if (static_cast<Eigen::Index>(t.data.size()) != t.rows * t.cols)
            throw StateError("tensor '" + t.name + "' size does not match its shape");
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    return out;
}

json tensor_index(const std::vector<Tensor>& tensors)
{
    json arr = json::array();
    for (const Tensor& t : tensors)
        arr.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
    return arr;
}

void write_container(const std::filesystem::path& path, const char* format, json manifest,
                     const std::vector<Tensor>& tensors)
{
    const std::string payload = tensor_bytes(tensors);
    manifest["format"] = format;
    manifest["tensors"] = tensor_index(tensors);
    manifest["payload_fnv1a"] = hex64(fnv1a(payload));
    const std::string text = manifest.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot write '" + path.string() + "'");
    os << format << '\n';
    const std::uint64_t n = text.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof n);
    os << text << payload;
    if (!os)
        throw InputError("write to '" + path.string() + "' failed");
}

struct Container {
    json manifest;
    std::vector<Tensor> tensors;
};

Container read_container(const std::filesystem::path& path, const char* format)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    const std::string bytes = ss.str();
    const std::string where = "'" + path.string() + "'";

    const auto nl = bytes.find('\n');
    if (nl == std::string::npos || nl > 64)
        throw CorruptionError(where + " is not a petal archive");
    const std::string magic = bytes.substr(0, nl);
    if (magic != format) {
        if (magic.rfind("petal-", 0) == 0)
            throw IncompatibleError(where + " has format '" + magic + "', expected '" + format + "'");
        throw CorruptionError(where + " is not a petal archive");
    }
    std::size_t pos = nl + 1;
    std::uint64_t n = 0;
    if (bytes.size() < pos + sizeof n)
        throw CorruptionError(where + " is truncated");
    std::memcpy(&n, bytes.data() + pos, sizeof n);
    pos += sizeof n;
    if (bytes.size() - pos < n)
        throw CorruptionError(where + " is truncated");

    Container c;
    try {
        c.manifest = json::parse(bytes.substr(pos, n));
        pos += n;
        const std::string payload = bytes.substr(pos);
        if (c.manifest.at("payload_fnv1a").get<std::string>() != hex64(fnv1a(payload)))
            throw CorruptionError(where + ": tensor payload checksum mismatch");
        std::size_t off = 0;
        for (const json& e : c.manifest.at("tensors")) {
            Tensor t;
            t.name = e.at("name").get<std::string>();
            t.rows = e.at("shape").at(0).get<Eigen::Index>();
            t.cols = e.at("shape").at(1).get<Eigen::Index>();
            if (t.rows < 0 || t.cols < 0)
                throw CorruptionError(where + ": negative tensor shape");
            const std::size_t count = static_cast<std::size_t>(t.rows * t.cols);
            if (payload.size() - off < count * sizeof(float))
                throw CorruptionError(where + ": tensor '" + t.name + "' runs past the end of the file");
            t.data.resize(count);
            std::memcpy(t.data.data(), payload.data() + off, count * sizeof(float));
            off += count * sizeof(float);
            c.tensors.push_back(std::move(t));
        }
        if (off != payload.size())
            throw CorruptionError(where + ": trailing bytes after the last tensor");
    } catch (const json::exception& e) {
        throw CorruptionError(where + ": bad manifest (" + e.what() + ")");
    }
    return c;
}

json backbone_json(const BackboneConfig& b)
{
    return {{"image_size", b.image_size}, {"channels", b.channels},   {"patch_size", b.patch_size},
            {"embed_dim", b.embed_dim},   {"attn_dim", b.attn_dim},   {"heads", b.heads},
            {"depth", b.depth},           {"mlp_dim", b.mlp_dim},     {"feature_dim", b.feature_dim},
            {"patch_reduction", b.patch_reduction}};
}

BackboneConfig backbone_from(const json& j)
{
    BackboneConfig b;
    b.image_size = j.at("image_size");
    b.channels = j.at("channels");
    b.patch_size = j.at("patch_size");
    b.embed_dim = j.at("embed_dim");
    b.attn_dim = j.at("attn_dim");
    b.heads = j.at("heads");
    b.depth = j.at("depth");
    b.mlp_dim = j.at("mlp_dim");
    b.feature_dim = j.at("feature_dim");
    b.patch_reduction = j.at("patch_reduction");
    return b;
}

} // namespace

const Tensor* AdapterCheckpoint::find(const std::string& name) const
{
    for (const Tensor& t : tensors)
        if (t.name == name)
            return &t;
    return nullptr;
}

void write_checkpoint(const AdapterCheckpoint& c, const std::filesystem::path& path)
{
    json sites = json::array();
    for (Site s : c.injection.sites)
        sites.push_back(std::string(site_name(s)));
    json m = {{"convention", kAlphaConvention},
              {"digest", c.digest},
              {"mode", std::string(mode_name(c.injection.mode))},
              {"rank", c.injection.rank},
              {"scale", c.injection.scale},
              {"dropout_rate", c.injection.dropout_rate},
              {"sites", sites},
              {"backbone", backbone_json(c.backbone)},
              {"layers", c.layer_ids}};
    if (!c.base_fingerprint.empty())
        m["base_fingerprint"] = c.base_fingerprint;
    if (c.calibration)
        m["calibration"] = {{"mu", c.calibration->mu},
                            {"sigma", c.calibration->sigma},
                            {"threshold", c.calibration->threshold},
                            {"l", c.calibration->sample_count},
                            {"estimator", c.calibration->estimator_name},
                            {"seed", c.calibration->seed}};
    std::vector<Tensor> tensors = c.tensors;
    if (c.head) {
        m["head"] = {{"variant", std::string(variant_name(c.head->variant))},
                     {"margin", c.head->margin},
                     {"logit_scale", c.head->logit_scale},
                     {"identities", c.head->identities},
                     {"tensor", c.head->class_weights.name}};
        tensors.push_back(c.head->class_weights);
    }
    write_container(path, kCheckpointFormat, std::move(m), tensors);
}

AdapterCheckpoint read_checkpoint(const std::filesystem::path& path)
{
    Container raw = read_container(path, kCheckpointFormat);
    const json& m = raw.manifest;
    AdapterCheckpoint c;
    try {
        if (m.at("convention").get<std::string>() != kAlphaConvention)
            throw IncompatibleError("checkpoint uses blend convention '" + m.at("convention").get<std::string>() +
                                    "', expected '" + kAlphaConvention + "'");
        c.digest = m.at("digest");
        const auto mode = parse_mode(m.at("mode").get<std::string>());
        if (!mode)
            throw CorruptionError("checkpoint: unknown adapter mode");
        c.injection.mode = *mode;
        c.injection.rank = m.at("rank");
        c.injection.scale = m.at("scale");
        c.injection.dropout_rate = m.at("dropout_rate");
        c.injection.sites.clear();
        for (const json& s : m.at("sites")) {
            const auto site = parse_site(s.get<std::string>());
            if (!site)
                throw CorruptionError("checkpoint: unknown site '" + s.get<std::string>() + "'");
            c.injection.sites.push_back(*site);
        }
        c.backbone = backbone_from(m.at("backbone"));
        c.layer_ids = m.at("layers").get<std::vector<std::string>>();
        if (m.contains("base_fingerprint"))
            c.base_fingerprint = m["base_fingerprint"].get<std::string>();
        if (m.contains("calibration")) {
            const json& k = m["calibration"];
            GateCalibration g;
            g.mu = k.at("mu");
            g.sigma = k.at("sigma");
            g.threshold = k.at("threshold");
            g.sample_count = k.at("l");
            g.estimator_name = k.at("estimator");
            g.seed = k.at("seed");
            c.calibration = g;
        }
        std::string head_tensor;
        if (m.contains("head")) {
            const json& h = m["head"];
            HeadState hs;
            const auto v = parse_variant(h.at("variant").get<std::string>());
            if (!v)
                throw CorruptionError("checkpoint: unknown margin variant");
            hs.variant = *v;
            hs.margin = h.at("margin");
            hs.logit_scale = h.at("logit_scale");
            hs.identities = h.at("identities").get<std::vector<std::string>>();
            head_tensor = h.at("tensor").get<std::string>();
            c.head = std::move(hs);
        }
        for (Tensor& t : raw.tensors) {
            if (c.head && t.name == head_tensor)
                c.head->class_weights = std::move(t);
            else
                c.tensors.push_back(std::move(t));
        }
        if (c.head && c.head->class_weights.name.empty())
            throw CorruptionError("checkpoint: head tensor '" + head_tensor + "' is missing");
    } catch (const json::exception& e) {
        throw CorruptionError("'" + path.string() + "': bad manifest (" + e.what() + ")");
    }
    return c;
}

void write_backbone(const BackboneWeights& w, const std::filesystem::path& path)
{
    write_container(path, kBackboneFormat, {{"backbone", backbone_json(w.config)}}, w.tensors);
}

BackboneWeights read_backbone(const std::filesystem::path& path)
{
    Container raw = read_container(path, kBackboneFormat);
    BackboneWeights w;
    try {
        w.config = backbone_from(raw.manifest.at("backbone"));
        w.config.validate();
    } catch (const json::exception& e) {
        throw CorruptionError("'" + path.string() + "': bad manifest (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw CorruptionError("'" + path.string() + "': " + e.what());
    }
    w.tensors = std::move(raw.tensors);
    return w;
}

} // namespace petal
