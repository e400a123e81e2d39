#include "petal/pipeline.hpp"

#include <set>

namespace petal {

Backbone initial_backbone(const RunConfig& cfg)
{
    if (!cfg.backbone_weights)
        return Backbone(cfg.backbone, derive_seed(cfg.seed, "backbone"));
    Backbone b = load_backbone<float>(read_backbone(*cfg.backbone_weights));
    if (!(b.config() == cfg.backbone))
        throw IncompatibleError("backbone file '" + *cfg.backbone_weights + "' does not match the configured backbone");
    return b;
}

BenchmarkSpec pretrain_pool_spec(const RunConfig& cfg)
{
    BenchmarkSpec s;
    s.n_identities = cfg.pretrain.identities;
    s.first_identity = cfg.pretrain.first_identity;
    s.train_per_identity = cfg.pretrain.images_per_identity;
    s.gallery_per_identity = 2;
    s.probe_per_identity = 2;
    s.train_degraded_fraction = 0.0;
    s.degradation_grid = {DegradationSpec{}};
    s.image_size = cfg.data.image_size;
    s.channels = cfg.data.channels;
    s.identity_spread = cfg.data.identity_spread;
    s.seed = derive_seed(cfg.seed, "pool");
    const int lo = s.first_identity, hi = lo + s.n_identities;
    const int blo = cfg.data.first_identity, bhi = blo + cfg.data.n_identities + cfg.data.unknown_identities;
    if (lo < bhi && blo < hi)
        throw ConfigError("pretrain identities overlap the benchmark identities");
    return s;
}

Backbone pretrain_backbone(const RunConfig& cfg, const GeneratedBenchmark& pool, std::ostream* progress,
                           TrainReport* report)
{
    const LabeledImages train = collect_split(pool.manifest, pool.images, Split::train);
    Model m = prepare_model(initial_backbone(cfg), TrainMode::full_ft, InjectionConfig{}, std::nullopt, cfg.seed);
    MarginHead<float> head =
        make_head(cfg.pretrain.loss, train.num_classes(), cfg.backbone.feature_dim, derive_seed(cfg.seed, "pretrain.head"));
    TrainConfig tc = cfg.pretrain.train;
    tc.mode = TrainMode::full_ft;
    TrainReport r = finetune(m, train, head, tc, progress);
    if (report != nullptr)
        *report = std::move(r);
    Backbone b = m.strip();
    b.set_base_trainable(false);
    return b;
}

MarginHead<float> make_head(const LossSettings& loss, int classes, int feature_dim, std::uint64_t seed)
{
    return make_margin_head<float>(classes, feature_dim, loss.variant, loss.resolved_margin(), loss.scale, seed);
}

QualityGate make_gate(const RunConfig& cfg, std::optional<GateCalibration> calibration)
{
    return QualityGate{make_estimator(cfg.gate.estimator, cfg.gate.range), std::move(calibration)};
}

EvalReport evaluate_model(const Model& model, const LabeledImages& gallery, const LabeledImages& probe,
                          const EvalSettings& eval)
{
    if (gallery.size() == 0)
        throw InputError("gallery split is empty");
    if (probe.size() == 0)
        throw InputError("probe split is empty");
    const EmbeddingSet g = extract(model, gallery, eval.batch_size);
    const EmbeddingSet p = extract(model, probe, eval.batch_size);
    const std::set<std::string> enrolled(g.labels.begin(), g.labels.end());
    std::vector<Eigen::Index> known, unknown;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        (enrolled.count(p.labels[static_cast<std::size_t>(i)]) ? known : unknown).push_back(i);
    auto subset = [&](const std::vector<Eigen::Index>& rows) {
        EmbeddingSet s;
        s.embeddings.resize(static_cast<Eigen::Index>(rows.size()), p.embeddings.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            s.embeddings.row(static_cast<Eigen::Index>(k)) = p.embeddings.row(rows[k]);
            s.labels.push_back(p.labels[static_cast<std::size_t>(rows[k])]);
            if (!p.paths.empty())
                s.paths.push_back(p.paths[static_cast<std::size_t>(rows[k])]);
        }
        return s;
    };
    if (known.empty())
        throw ProtocolError("no probe identity is enrolled in the gallery");
    const EmbeddingSet kp = subset(known);
    if (unknown.empty())
        return evaluate_embeddings(g, kp, nullptr, eval.options);
    const EmbeddingSet up = subset(unknown);
    return evaluate_embeddings(g, kp, &up, eval.options);
}

double balanced_verification(const Model& model, const LabeledImages& gallery, const LabeledImages& probe,
                             int batch_size, std::uint64_t seed)
{
    std::vector<double> scores;
    std::vector<bool> same;
    cross_pairs(extract(model, probe, batch_size), extract(model, gallery, batch_size), scores, same);
    balance_pairs(scores, same, seed);
    return verification_accuracy(scores, same).accuracy;
}

} // namespace petal
