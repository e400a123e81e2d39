#include "petal/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace petal {

using nlohmann::json;

namespace {

std::string type_word(const json& j)
{
    return j.type_name();
}

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            throw ConfigError("'" + (path_.empty() ? std::string("<root>") : path_) + "' must be an object, got " +
                              type_word(j_));
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <typename T>
    void get(const char* key, T& out)
    {
        if (!j_.contains(key))
            return;
        seen_.insert(key);
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean())
                fail(key, "a boolean", v);
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer())
                fail(key, "an integer", v);
            if constexpr (std::is_unsigned_v<T>)
                if (v.is_number_integer() && !v.is_number_unsigned())
                    fail(key, "a nonnegative integer", v);
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number())
                fail(key, "a number", v);
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string())
                fail(key, "a string", v);
        }
        out = v.get<T>();
    }

    template <typename T>
    void get(const char* key, std::optional<T>& out)
    {
        if (!j_.contains(key))
            return;
        if (j_.at(key).is_null()) {
            seen_.insert(key);
            out.reset();
            return;
        }
        T v{};
        get(key, v);
        out = v;
    }

    template <typename T>
    void get_list(const char* key, std::vector<T>& out)
    {
        if (!j_.contains(key))
            return;
        seen_.insert(key);
        const json& v = j_.at(key);
        if (!v.is_array())
            fail(key, "an array", v);
        out.clear();
        for (const json& e : v) {
            if constexpr (std::is_integral_v<T>) {
                if (!e.is_number_integer())
                    fail(key, "an array of integers", v);
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!e.is_number())
                    fail(key, "an array of numbers", v);
            } else {
                if (!e.is_string())
                    fail(key, "an array of strings", v);
            }
            out.push_back(e.get<T>());
        }
    }

    /// Nested object reader; the caller must call finish() on it.
    std::optional<Reader> child(const char* key)
    {
        if (!j_.contains(key))
            return std::nullopt;
        seen_.insert(key);
        return Reader(j_.at(key), where(key));
    }

    const json& raw(const char* key)
    {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown key '" + where(it.key().c_str()) + "'");
    }

    [[noreturn]] void fail(const char* key, const char* want, const json& v) const
    {
        throw ConfigError("'" + where(key) + "' must be " + want + ", got " + type_word(v));
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename T, typename Parse>
void get_enum(Reader& r, const char* key, T& out, Parse parse)
{
    std::string s;
    if (!r.has(key))
        return;
    r.get(key, s);
    const auto v = parse(s);
    if (!v)
        throw ConfigError("'" + r.where(key) + "': unrecognized value '" + s + "'");
    out = *v;
}

void read_degradation(const json& j, const std::string& path, DegradationSpec& d)
{
    Reader r(j, path);
    r.get("blur_sigma", d.blur_sigma);
    r.get("downscale_factor", d.downscale_factor);
    r.get("noise_sigma", d.noise_sigma);
    r.get("jpeg_quality", d.jpeg_quality);
    r.get("occlusion_fraction", d.occlusion_fraction);
    r.finish();
}

void read_train(Reader& r, TrainConfig& t)
{
    r.get("epochs", t.epochs);
    r.get("warmup_epochs", t.warmup_epochs);
    r.get("batch_size", t.batch_size);
    r.get("initial_lr", t.initial_lr);
    r.get("weight_decay", t.weight_decay);
    r.get("lr_power", t.lr_power);
    r.get("clip_norm", t.clip_norm);
    r.get("alpha_override", t.alpha_override);
    get_enum(r, "mode", t.mode, [](const std::string& s) { return parse_train_mode(s); });
    r.finish();
}

json train_json(const TrainConfig& t, bool with_mode)
{
    json j = {{"epochs", t.epochs},
              {"warmup_epochs", t.warmup_epochs},
              {"batch_size", t.batch_size},
              {"initial_lr", t.initial_lr},
              {"weight_decay", t.weight_decay},
              {"lr_power", t.lr_power},
              {"clip_norm", t.clip_norm ? json(*t.clip_norm) : json(nullptr)},
              {"alpha_override", t.alpha_override ? json(*t.alpha_override) : json(nullptr)}};
    if (with_mode)
        j["mode"] = std::string(train_mode_name(t.mode));
    return j;
}

} // namespace

void RunConfig::set_seed(std::uint64_t s)
{
    seed = s;
    data.seed = s;
    train.seed = s;
    pretrain.train.seed = derive_seed(s, "pretrain");
}

void RunConfig::validate() const
{
    data.validate();
    backbone.validate();
    injection.validate();
    train.validate();
    pretrain.train.validate();
    if (backbone.image_size != data.image_size || backbone.channels != data.channels)
        throw ConfigError("backbone image_size/channels must match data image_size/channels");
    if (gate.samples < 1)
        throw ConfigError("gate.samples must be at least 1");
    if (!(gate.range.second > gate.range.first))
        throw ConfigError("gate.range must satisfy low < high");
    if (gate.estimator != "sharpness" && gate.estimator != "precomputed")
        throw ConfigError("gate.estimator must be 'sharpness' or 'precomputed'");
    for (const LossSettings* l : {&loss, &pretrain.loss})
        if (!(l->scale > 0.0) || (l->margin && !(*l->margin >= 0.0)))
            throw ConfigError("loss: scale must be positive and margin nonnegative");
    if (pretrain.identities < 2 || pretrain.images_per_identity < 1)
        throw ConfigError("pretrain: at least 2 identities and 1 image per identity");
    if (eval.batch_size < 1)
        throw ConfigError("eval.batch_size must be at least 1");
    if (eval.probe_split == Split::train)
        throw ConfigError("eval.probe_split must be 'probe' or 'gallery'");
}

RunConfig parse_run_config(const std::string& text)
{
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    Reader r(root, "");
    r.get("seed", c.seed);
    r.get("out", c.out);
    if (auto d = r.child("data")) {
        BenchmarkSpec& s = c.data;
        d->get("n_identities", s.n_identities);
        d->get("train_per_identity", s.train_per_identity);
        d->get("gallery_per_identity", s.gallery_per_identity);
        d->get("probe_per_identity", s.probe_per_identity);
        d->get("train_degraded_fraction", s.train_degraded_fraction);
        d->get("unknown_identities", s.unknown_identities);
        d->get("first_identity", s.first_identity);
        d->get("image_size", s.image_size);
        d->get("channels", s.channels);
        d->get("identity_spread", s.identity_spread);
        d->get("manifest", c.manifest);
        if (d->has("grid")) {
            const json& g = d->raw("grid");
            if (!g.is_array())
                throw ConfigError("'data.grid' must be an array, got " + type_word(g));
            s.degradation_grid.clear();
            for (std::size_t i = 0; i < g.size(); ++i) {
                DegradationSpec ds;
                read_degradation(g[i], "data.grid[" + std::to_string(i) + "]", ds);
                s.degradation_grid.push_back(ds);
            }
        }
        d->finish();
    }
    if (auto b = r.child("backbone")) {
        BackboneConfig& s = c.backbone;
        b->get("image_size", s.image_size);
        b->get("channels", s.channels);
        b->get("patch_size", s.patch_size);
        b->get("embed_dim", s.embed_dim);
        b->get("attn_dim", s.attn_dim);
        b->get("heads", s.heads);
        b->get("depth", s.depth);
        b->get("mlp_dim", s.mlp_dim);
        b->get("feature_dim", s.feature_dim);
        b->get("patch_reduction", s.patch_reduction);
        b->get("weights", c.backbone_weights);
        b->finish();
    }
    if (auto i = r.child("injection")) {
        if (i->has("preset")) {
            std::string p;
            i->get("preset", p);
            c.injection = InjectionConfig::preset(p);
        }
        if (i->has("sites")) {
            std::vector<std::string> names;
            i->get_list("sites", names);
            c.injection.sites.clear();
            for (const auto& n : names) {
                const auto s = parse_site(n);
                if (!s)
                    throw ConfigError("'injection.sites': unknown site '" + n + "'");
                c.injection.sites.push_back(*s);
            }
        }
        i->get("rank", c.injection.rank);
        i->get("scale", c.injection.scale);
        i->get("dropout_rate", c.injection.dropout_rate);
        i->finish();
    }
    if (auto g = r.child("gate")) {
        g->get("estimator", c.gate.estimator);
        g->get("samples", c.gate.samples);
        if (g->has("range")) {
            std::vector<double> range;
            g->get_list("range", range);
            if (range.size() != 2)
                throw ConfigError("'gate.range' must hold exactly two numbers");
            c.gate.range = {range[0], range[1]};
        }
        g->finish();
    }
    if (auto l = r.child("loss")) {
        get_enum(*l, "variant", c.loss.variant, [](const std::string& s) { return parse_variant(s); });
        l->get("margin", c.loss.margin);
        l->get("scale", c.loss.scale);
        l->finish();
    }
    if (auto t = r.child("train")) {
        read_train(*t, c.train);
    }
    if (auto p = r.child("pretrain")) {
        p->get("identities", c.pretrain.identities);
        p->get("images_per_identity", c.pretrain.images_per_identity);
        p->get("first_identity", c.pretrain.first_identity);
        if (auto l = p->child("loss")) {
            get_enum(*l, "variant", c.pretrain.loss.variant, [](const std::string& s) { return parse_variant(s); });
            l->get("margin", c.pretrain.loss.margin);
            l->get("scale", c.pretrain.loss.scale);
            l->finish();
        }
        p->get("epochs", c.pretrain.train.epochs);
        p->get("warmup_epochs", c.pretrain.train.warmup_epochs);
        p->get("batch_size", c.pretrain.train.batch_size);
        p->get("initial_lr", c.pretrain.train.initial_lr);
        p->get("weight_decay", c.pretrain.train.weight_decay);
        p->get("lr_power", c.pretrain.train.lr_power);
        p->get("clip_norm", c.pretrain.train.clip_norm);
        p->finish();
    }
    if (auto e = r.child("eval")) {
        e->get("batch_size", c.eval.batch_size);
        e->get_list("ranks", c.eval.options.ranks);
        e->get_list("fars", c.eval.options.fars);
        e->get_list("fpirs", c.eval.options.fpirs);
        e->get("probe_templates", c.eval.options.probe_templates);
        get_enum(*e, "probe_split", c.eval.probe_split, [](const std::string& s) { return parse_split(s); });
        e->finish();
    }
    r.finish();
    c.set_seed(c.seed);
    c.train.calibration_samples = c.gate.samples;
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw ConfigError("cannot read config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& c)
{
    json grid = json::array();
    for (const auto& d : c.data.degradation_grid)
        grid.push_back({{"blur_sigma", d.blur_sigma},
                        {"downscale_factor", d.downscale_factor},
                        {"noise_sigma", d.noise_sigma},
                        {"jpeg_quality", d.jpeg_quality},
                        {"occlusion_fraction", d.occlusion_fraction}});
    json sites = json::array();
    for (Site s : c.injection.sites)
        sites.push_back(std::string(site_name(s)));
    json pre = train_json(c.pretrain.train, false);
    pre.erase("alpha_override");
    pre["identities"] = c.pretrain.identities;
    pre["images_per_identity"] = c.pretrain.images_per_identity;
    pre["first_identity"] = c.pretrain.first_identity;
    pre["loss"] = {{"variant", std::string(variant_name(c.pretrain.loss.variant))},
                   {"margin", c.pretrain.loss.resolved_margin()},
                   {"scale", c.pretrain.loss.scale}};
    const BackboneConfig& b = c.backbone;
    json j = {
        {"seed", c.seed},
        {"out", c.out},
        {"data",
         {{"n_identities", c.data.n_identities},
          {"train_per_identity", c.data.train_per_identity},
          {"gallery_per_identity", c.data.gallery_per_identity},
          {"probe_per_identity", c.data.probe_per_identity},
          {"train_degraded_fraction", c.data.train_degraded_fraction},
          {"unknown_identities", c.data.unknown_identities},
          {"first_identity", c.data.first_identity},
          {"image_size", c.data.image_size},
          {"channels", c.data.channels},
          {"identity_spread", c.data.identity_spread},
          {"manifest", c.manifest ? json(*c.manifest) : json(nullptr)},
          {"grid", grid}}},
        {"backbone",
         {{"image_size", b.image_size},
          {"channels", b.channels},
          {"patch_size", b.patch_size},
          {"embed_dim", b.embed_dim},
          {"attn_dim", b.attn_dim},
          {"heads", b.heads},
          {"depth", b.depth},
          {"mlp_dim", b.mlp_dim},
          {"feature_dim", b.feature_dim},
          {"patch_reduction", b.patch_reduction},
          {"weights", c.backbone_weights ? json(*c.backbone_weights) : json(nullptr)}}},
        {"injection",
         {{"sites", sites},
          {"rank", c.injection.rank},
          {"scale", c.injection.scale},
          {"dropout_rate", c.injection.dropout_rate}}},
        {"gate",
         {{"estimator", c.gate.estimator}, {"samples", c.gate.samples}, {"range", {c.gate.range.first, c.gate.range.second}}}},
        {"loss",
         {{"variant", std::string(variant_name(c.loss.variant))},
          {"margin", c.loss.resolved_margin()},
          {"scale", c.loss.scale}}},
        {"train", train_json(c.train, true)},
        {"pretrain", pre},
        {"eval",
         {{"batch_size", c.eval.batch_size},
          {"ranks", c.eval.options.ranks},
          {"fars", c.eval.options.fars},
          {"fpirs", c.eval.options.fpirs},
          {"probe_templates", c.eval.options.probe_templates},
          {"probe_split", split_name(c.eval.probe_split)}}}};
    return j.dump(2);
}

} // namespace petal
