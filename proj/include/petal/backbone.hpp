#pragma once

// Desk-scale vision-transformer encoder with hand-written reverse mode.
//
// pixels (p x C*H*W) -> patch tokens -> [block]* with an optional 2x2 token
// merge ("patch reduction") halfway -> layer norm -> mean pool -> feature head.
// Every linear sublayer is a LinearSite addressable by a stable id.

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "petal/adapters.hpp"

namespace petal {

enum class Site { attention_qkv, attention_proj, mlp, patch_reduction, feature_head };

inline constexpr std::array<Site, 5> kAllSites{Site::attention_qkv, Site::attention_proj, Site::mlp,
                                               Site::patch_reduction, Site::feature_head};

inline std::string_view site_name(Site s)
{
    switch (s) {
    case Site::attention_qkv: return "attention_qkv";
    case Site::attention_proj: return "attention_proj";
    case Site::mlp: return "mlp";
    case Site::patch_reduction: return "patch_reduction";
    case Site::feature_head: return "feature_head";
    }
    return "?";
}

inline std::optional<Site> parse_site(std::string_view name)
{
    for (Site s : kAllSites)
        if (site_name(s) == name)
            return s;
    return std::nullopt;
}

struct BackboneConfig {
    int image_size = 64;
    int channels = 1;
    int patch_size = 8;
    int embed_dim = 96;
    int attn_dim = 32; // fused qkv maps embed_dim -> 3 * attn_dim
    int heads = 2;
    int depth = 2;
    int mlp_dim = 192;
    int feature_dim = 128;
    bool patch_reduction = true;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    int pixels() const { return channels * image_size * image_size; }
    bool has_reduction() const { return patch_reduction && depth >= 2; }
    int reduction_index() const { return depth / 2; }

    void validate() const
    {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok)
                throw ConfigError("backbone: " + msg);
        };
        need(image_size > 0 && patch_size > 0, "image_size and patch_size must be positive");
        need(image_size % patch_size == 0, "image_size must be a multiple of patch_size");
        need(channels == 1 || channels == 3, "channels must be 1 or 3");
        need(embed_dim > 0 && attn_dim > 0 && mlp_dim > 0 && feature_dim > 0, "dimensions must be positive");
        need(heads > 0 && attn_dim % heads == 0, "attn_dim must be divisible by heads");
        need(depth >= 1, "depth must be at least 1");
        need(!has_reduction() || grid() % 2 == 0, "patch reduction needs an even token grid");
    }

    bool operator==(const BackboneConfig&) const = default;
};

template <typename Scalar>
struct LayerNorm {
    Param<Scalar> gamma; // d x 1
    Param<Scalar> beta;  // d x 1
    static constexpr double kEps = 1e-5;

    struct Trace {
        Mat<Scalar> xhat;
        Vec<Scalar> inv_std;
    };

    Mat<Scalar> forward(const Mat<Scalar>& x, Trace* trace) const
    {
        const Eigen::Index d = x.cols();
        Vec<Scalar> mean = x.rowwise().mean();
        Mat<Scalar> centered = x.colwise() - mean;
        Vec<Scalar> var = centered.array().square().rowwise().sum() / Scalar(d);
        Vec<Scalar> inv_std = (var.array() + Scalar(kEps)).rsqrt();
        Mat<Scalar> xhat = inv_std.asDiagonal() * centered;
        Mat<Scalar> y = xhat * gamma.value.col(0).asDiagonal();
        y.rowwise() += beta.value.col(0).transpose();
        if (trace != nullptr) {
            trace->xhat = std::move(xhat);
            trace->inv_std = std::move(inv_std);
        }
        return y;
    }

    Mat<Scalar> backward(const Trace& t, const Mat<Scalar>& dy)
    {
        const Scalar d = Scalar(dy.cols());
        gamma.accumulate((dy.cwiseProduct(t.xhat)).colwise().sum().transpose());
        beta.accumulate(dy.colwise().sum().transpose());
        Mat<Scalar> dxhat = dy * gamma.value.col(0).asDiagonal();
        Vec<Scalar> m1 = dxhat.rowwise().sum() / d;
        Vec<Scalar> m2 = dxhat.cwiseProduct(t.xhat).rowwise().sum() / d;
        Mat<Scalar> dx = dxhat;
        dx.colwise() -= m1;
        dx -= m2.asDiagonal() * t.xhat;
        return t.inv_std.asDiagonal() * dx;
    }
};

template <typename Scalar>
struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;
    /// Called once per adapted site with the per-sample blend weights it received.
    std::function<void(const std::string& site_id, const Vec<Scalar>& alpha)> on_alpha;
};

template <typename Scalar>
class ToyBackbone {
public:
    struct Block {
        LayerNorm<Scalar> ln1;
        LinearSite<Scalar> qkv;
        LinearSite<Scalar> proj;
        LayerNorm<Scalar> ln2;
        LinearSite<Scalar> fc1;
        LinearSite<Scalar> fc2;
    };

    struct Tape {
        struct BlockTape {
            typename LayerNorm<Scalar>::Trace ln1;
            LinearTrace<Scalar> qkv;
            Mat<Scalar> qkv_out;
            std::vector<Mat<Scalar>> attn; // softmax matrices, sample-major then head
            LinearTrace<Scalar> proj;
            typename LayerNorm<Scalar>::Trace ln2;
            LinearTrace<Scalar> fc1;
            Mat<Scalar> fc1_out;
            LinearTrace<Scalar> fc2;
            int tokens = 0;
        };
        int batch = 0;
        LinearTrace<Scalar> patch;
        std::vector<BlockTape> blocks;
        LinearTrace<Scalar> reduction;
        typename LayerNorm<Scalar>::Trace ln_final;
        LinearTrace<Scalar> head;
        int final_tokens = 0;
    };

    ToyBackbone() = default;

    ToyBackbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg)
    {
        cfg_.validate();
        const int d = cfg_.embed_dim;
        const int patch_dim = cfg_.channels * cfg_.patch_size * cfg_.patch_size;
        auto lin = [&](int m, int n, const std::string& id) {
            return LinearSite<Scalar>(id, init_linear<Scalar>(m, n, true, derive_seed(seed, id), id));
        };
        auto ln = [&](const std::string& id) {
            LayerNorm<Scalar> l;
            l.gamma = Param<Scalar>(id + ".gamma", Mat<Scalar>::Ones(d, 1));
            l.beta = Param<Scalar>(id + ".beta", Mat<Scalar>::Zero(d, 1));
            return l;
        };
        patch_embed_ = lin(d, patch_dim, "patch_embed");
        pos_embed_ = Param<Scalar>("pos_embed",
                                   gaussian_matrix<Scalar>(cfg_.tokens(), d, 0.02, derive_seed(seed, "pos_embed")));
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            blocks_.push_back(Block{ln(p + "ln1"), lin(3 * cfg_.attn_dim, d, p + "attn.qkv"),
                                    lin(d, cfg_.attn_dim, p + "attn.proj"), ln(p + "ln2"),
                                    lin(cfg_.mlp_dim, d, p + "mlp.fc1"), lin(d, cfg_.mlp_dim, p + "mlp.fc2")});
        }
        if (cfg_.has_reduction())
            reduction_ = lin(d, 4 * d, "reduction");
        ln_final_ = ln("ln_final");
        head_ = lin(cfg_.feature_dim, d, "head");
    }

    const BackboneConfig& config() const { return cfg_; }

    /// Linear sublayers that adapters may be injected into, with their site kind.
    std::vector<std::pair<Site, LinearSite<Scalar>*>> injectable()
    {
        std::vector<std::pair<Site, LinearSite<Scalar>*>> out;
        for (auto& b : blocks_) {
            out.emplace_back(Site::attention_qkv, &b.qkv);
            out.emplace_back(Site::attention_proj, &b.proj);
            out.emplace_back(Site::mlp, &b.fc1);
            out.emplace_back(Site::mlp, &b.fc2);
        }
        if (reduction_)
            out.emplace_back(Site::patch_reduction, &*reduction_);
        out.emplace_back(Site::feature_head, &head_);
        return out;
    }

    std::vector<const LinearSite<Scalar>*> linear_sites() const
    {
        std::vector<const LinearSite<Scalar>*> out{&patch_embed_};
        for (const auto& b : blocks_)
            for (const auto* s : {&b.qkv, &b.proj, &b.fc1, &b.fc2})
                out.push_back(s);
        if (reduction_)
            out.push_back(&*reduction_);
        out.push_back(&head_);
        return out;
    }

    LinearSite<Scalar>* find_site(std::string_view id)
    {
        for (auto& [kind, site] : injectable())
            if (site->id() == id)
                return site;
        return nullptr;
    }

    template <typename Fn>
    void for_each_param(Fn&& fn)
    {
        patch_embed_.for_each_param(fn);
        fn(pos_embed_);
        for (auto& b : blocks_) {
            fn(b.ln1.gamma);
            fn(b.ln1.beta);
            b.qkv.for_each_param(fn);
            b.proj.for_each_param(fn);
            fn(b.ln2.gamma);
            fn(b.ln2.beta);
            b.fc1.for_each_param(fn);
            b.fc2.for_each_param(fn);
        }
        if (reduction_)
            reduction_->for_each_param(fn);
        fn(ln_final_.gamma);
        fn(ln_final_.beta);
        head_.for_each_param(fn);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const
    {
        const_cast<ToyBackbone*>(this)->for_each_param([&](Param<Scalar>& p) { fn(std::as_const(p)); });
    }

    /// Base (non-adapter) parameters: everything the pristine backbone owns.
    template <typename Fn>
    void for_each_base_param(Fn&& fn)
    {
        auto linear = [&](LinearSite<Scalar>& s) {
            fn(s.base().weight);
            if (s.base().has_bias())
                fn(s.base().bias);
        };
        linear(patch_embed_);
        fn(pos_embed_);
        for (auto& b : blocks_) {
            fn(b.ln1.gamma);
            fn(b.ln1.beta);
            linear(b.qkv);
            linear(b.proj);
            fn(b.ln2.gamma);
            fn(b.ln2.beta);
            linear(b.fc1);
            linear(b.fc2);
        }
        if (reduction_)
            linear(*reduction_);
        fn(ln_final_.gamma);
        fn(ln_final_.beta);
        linear(head_);
    }

    void set_base_trainable(bool on)
    {
        for_each_base_param([on](Param<Scalar>& p) { p.trainable = on; });
    }

    void zero_grad()
    {
        for_each_param([](Param<Scalar>& p) { p.zero_grad(); });
    }

    /// Rearranges raw pixels (one image per row, channel-major) into patch rows.
    Mat<Scalar> patchify(const Mat<Scalar>& pixels) const
    {
        if (pixels.cols() != cfg_.pixels())
            throw DimensionError("backbone expects " + std::to_string(cfg_.pixels()) + " pixels per image, got " +
                                 std::to_string(pixels.cols()));
        const int P = cfg_.patch_size, S = cfg_.image_size, g = cfg_.grid(), T = cfg_.tokens();
        const int C = cfg_.channels;
        Mat<Scalar> out(pixels.rows() * T, C * P * P);
        for (Eigen::Index n = 0; n < pixels.rows(); ++n)
            for (int gy = 0; gy < g; ++gy)
                for (int gx = 0; gx < g; ++gx) {
                    const Eigen::Index row = n * T + gy * g + gx;
                    int col = 0;
                    for (int c = 0; c < C; ++c)
                        for (int dy = 0; dy < P; ++dy)
                            for (int dx = 0; dx < P; ++dx)
                                out(row, col++) = pixels(n, c * S * S + (gy * P + dy) * S + gx * P + dx);
                }
        return out;
    }

    /// Forward pass. `alpha` holds one blend weight per image; pass an empty
    /// vector when no site is adapted. When `tape` is non-null, everything
    /// needed by backward() is recorded there.
    Mat<Scalar> forward(const Mat<Scalar>& pixels, const Vec<Scalar>& alpha,
                        const ForwardOptions<Scalar>& opt = {}, Tape* tape = nullptr) const
    {
        const Eigen::Index p = pixels.rows();
        Vec<Scalar> a = alpha;
        if (a.size() == 0)
            a = Vec<Scalar>::Constant(p, Scalar(1));
        if (a.size() != p)
            throw DimensionError("blend weights: expected one per image (" + std::to_string(p) + "), got " +
                                 std::to_string(a.size()));
        if (tape != nullptr) {
            *tape = Tape{};
            tape->batch = static_cast<int>(p);
        }
        auto notify = [&](const LinearSite<Scalar>& s) {
            if (opt.on_alpha && s.adapted())
                opt.on_alpha(s.id(), a);
        };
        auto rows_alpha = [&](int tokens) {
            Vec<Scalar> r(p * tokens);
            for (Eigen::Index n = 0; n < p; ++n)
                r.segment(n * tokens, tokens).setConstant(a(n));
            return r;
        };

        int T = cfg_.tokens();
        Vec<Scalar> ra = rows_alpha(T);
        notify(patch_embed_);
        Mat<Scalar> h = patch_embed_.forward(patchify(pixels), ra, opt.training, opt.rng,
                                             tape ? &tape->patch : nullptr);
        for (Eigen::Index n = 0; n < p; ++n)
            h.middleRows(n * T, T) += pos_embed_.value;

        for (int i = 0; i < cfg_.depth; ++i) {
            if (reduction_ && i == cfg_.reduction_index()) {
                notify(*reduction_);
                h = merge_tokens(h, static_cast<int>(p), T);
                T /= 4;
                ra = rows_alpha(T);
                h = reduction_->forward(h, ra, opt.training, opt.rng, tape ? &tape->reduction : nullptr);
            }
            const Block& b = blocks_[i];
            typename Tape::BlockTape* bt = nullptr;
            if (tape != nullptr) {
                tape->blocks.emplace_back();
                bt = &tape->blocks.back();
                bt->tokens = T;
            }
            for (const auto* s : {&b.qkv, &b.proj, &b.fc1, &b.fc2})
                notify(*s);
            Mat<Scalar> u = b.ln1.forward(h, bt ? &bt->ln1 : nullptr);
            Mat<Scalar> qkv = b.qkv.forward(u, ra, opt.training, opt.rng, bt ? &bt->qkv : nullptr);
            Mat<Scalar> att = attention(qkv, static_cast<int>(p), T, bt ? &bt->attn : nullptr);
            if (bt)
                bt->qkv_out = qkv;
            h += b.proj.forward(att, ra, opt.training, opt.rng, bt ? &bt->proj : nullptr);
            Mat<Scalar> v = b.ln2.forward(h, bt ? &bt->ln2 : nullptr);
            Mat<Scalar> f = b.fc1.forward(v, ra, opt.training, opt.rng, bt ? &bt->fc1 : nullptr);
            Mat<Scalar> g = f.unaryExpr([](Scalar z) { return gelu(z); });
            if (bt)
                bt->fc1_out = std::move(f);
            h += b.fc2.forward(g, ra, opt.training, opt.rng, bt ? &bt->fc2 : nullptr);
        }

        Mat<Scalar> z = ln_final_.forward(h, tape ? &tape->ln_final : nullptr);
        Mat<Scalar> pooled(p, z.cols());
        for (Eigen::Index n = 0; n < p; ++n)
            pooled.row(n) = z.middleRows(n * T, T).colwise().mean();
        notify(head_);
        if (tape != nullptr)
            tape->final_tokens = T;
        return head_.forward(pooled, a, opt.training, opt.rng, tape ? &tape->head : nullptr);
    }

    /// Accumulates parameter gradients for d(loss)/d(embeddings) = `d_embed`.
    void backward(const Tape& tape, const Mat<Scalar>& d_embed)
    {
        const int p = tape.batch;
        int T = tape.final_tokens;
        Mat<Scalar> d_pooled = head_.backward(tape.head, d_embed);
        Mat<Scalar> dz(static_cast<Eigen::Index>(p) * T, d_pooled.cols());
        for (int n = 0; n < p; ++n)
            dz.middleRows(n * T, T) = (d_pooled.row(n) / Scalar(T)).replicate(T, 1);
        Mat<Scalar> dh = ln_final_.backward(tape.ln_final, dz);

        for (int i = cfg_.depth - 1; i >= 0; --i) {
            Block& b = blocks_[i];
            const auto& bt = tape.blocks[i];
            T = bt.tokens;
            Mat<Scalar> dg = b.fc2.backward(bt.fc2, dh);
            Mat<Scalar> df = dg.cwiseProduct(bt.fc1_out.unaryExpr([](Scalar z) { return gelu_grad(z); }));
            dh += b.ln2.backward(bt.ln2, b.fc1.backward(bt.fc1, df));
            Mat<Scalar> datt = b.proj.backward(bt.proj, dh);
            Mat<Scalar> dqkv = attention_backward(bt.qkv_out, bt.attn, datt, p, T);
            dh += b.ln1.backward(bt.ln1, b.qkv.backward(bt.qkv, dqkv));
            if (reduction_ && i == cfg_.reduction_index()) {
                Mat<Scalar> dm = reduction_->backward(tape.reduction, dh);
                dh = unmerge_tokens(dm, p, T * 4);
            }
        }
        const int T0 = cfg_.tokens();
        Mat<Scalar> dpos = Mat<Scalar>::Zero(T0, dh.cols());
        for (int n = 0; n < p; ++n)
            dpos += dh.middleRows(static_cast<Eigen::Index>(n) * T0, T0);
        pos_embed_.accumulate(dpos);
        patch_embed_.backward(tape.patch, dh);
    }

    static Scalar gelu(Scalar z)
    {
        constexpr Scalar c = Scalar(0.7978845608028654);
        return Scalar(0.5) * z * (Scalar(1) + std::tanh(c * (z + Scalar(0.044715) * z * z * z)));
    }

    static Scalar gelu_grad(Scalar z)
    {
        constexpr Scalar c = Scalar(0.7978845608028654);
        const Scalar t = std::tanh(c * (z + Scalar(0.044715) * z * z * z));
        return Scalar(0.5) * (Scalar(1) + t) +
               Scalar(0.5) * z * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3 * 0.044715) * z * z);
    }

private:
    Mat<Scalar> attention(const Mat<Scalar>& qkv, int p, int T, std::vector<Mat<Scalar>>* probs) const
    {
        const int a = cfg_.attn_dim, H = cfg_.heads, dh = a / H;
        const Scalar inv = Scalar(1) / std::sqrt(Scalar(dh));
        Mat<Scalar> out(qkv.rows(), a);
        for (int n = 0; n < p; ++n) {
            const auto blk = qkv.middleRows(static_cast<Eigen::Index>(n) * T, T);
            for (int k = 0; k < H; ++k) {
                Mat<Scalar> s = blk.middleCols(k * dh, dh) * blk.middleCols(a + k * dh, dh).transpose() * inv;
                Vec<Scalar> mx = s.rowwise().maxCoeff();
                s = (s.colwise() - mx).array().exp().matrix();
                Vec<Scalar> sum = s.rowwise().sum();
                s = sum.cwiseInverse().asDiagonal() * s;
                out.block(static_cast<Eigen::Index>(n) * T, k * dh, T, dh) = s * blk.middleCols(2 * a + k * dh, dh);
                if (probs)
                    probs->push_back(std::move(s));
            }
        }
        return out;
    }

    Mat<Scalar> attention_backward(const Mat<Scalar>& qkv, const std::vector<Mat<Scalar>>& probs,
                                   const Mat<Scalar>& dout, int p, int T) const
    {
        const int a = cfg_.attn_dim, H = cfg_.heads, dh = a / H;
        const Scalar inv = Scalar(1) / std::sqrt(Scalar(dh));
        Mat<Scalar> dqkv(qkv.rows(), qkv.cols());
        for (int n = 0; n < p; ++n) {
            const Eigen::Index r0 = static_cast<Eigen::Index>(n) * T;
            const auto blk = qkv.middleRows(r0, T);
            for (int k = 0; k < H; ++k) {
                const Mat<Scalar>& P = probs[static_cast<std::size_t>(n) * H + k];
                const auto dO = dout.block(r0, k * dh, T, dh);
                const auto Q = blk.middleCols(k * dh, dh);
                const auto K = blk.middleCols(a + k * dh, dh);
                const auto V = blk.middleCols(2 * a + k * dh, dh);
                Mat<Scalar> dP = dO * V.transpose();
                dqkv.block(r0, 2 * a + k * dh, T, dh) = P.transpose() * dO;
                Vec<Scalar> rs = dP.cwiseProduct(P).rowwise().sum();
                Mat<Scalar> dS = P.cwiseProduct(dP.colwise() - rs) * inv;
                dqkv.block(r0, k * dh, T, dh) = dS * K;
                dqkv.block(r0, a + k * dh, T, dh) = dS.transpose() * Q;
            }
        }
        return dqkv;
    }

    // 2x2 neighbourhood merge: (p*T x d) -> (p*T/4 x 4d).
    Mat<Scalar> merge_tokens(const Mat<Scalar>& h, int p, int T) const
    {
        const int g = static_cast<int>(std::lround(std::sqrt(double(T))));
        const int g2 = g / 2;
        const Eigen::Index d = h.cols();
        Mat<Scalar> out(static_cast<Eigen::Index>(p) * g2 * g2, 4 * d);
        for (int n = 0; n < p; ++n)
            for (int y = 0; y < g2; ++y)
                for (int x = 0; x < g2; ++x) {
                    const Eigen::Index row = static_cast<Eigen::Index>(n) * g2 * g2 + y * g2 + x;
                    int q = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx, ++q)
                            out.block(row, q * d, 1, d) =
                                h.row(static_cast<Eigen::Index>(n) * T + (2 * y + dy) * g + 2 * x + dx);
                }
        return out;
    }

    Mat<Scalar> unmerge_tokens(const Mat<Scalar>& dm, int p, int T) const
    {
        const int g = static_cast<int>(std::lround(std::sqrt(double(T))));
        const int g2 = g / 2;
        const Eigen::Index d = dm.cols() / 4;
        Mat<Scalar> dh(static_cast<Eigen::Index>(p) * T, d);
        for (int n = 0; n < p; ++n)
            for (int y = 0; y < g2; ++y)
                for (int x = 0; x < g2; ++x) {
                    const Eigen::Index row = static_cast<Eigen::Index>(n) * g2 * g2 + y * g2 + x;
                    int q = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx, ++q)
                            dh.row(static_cast<Eigen::Index>(n) * T + (2 * y + dy) * g + 2 * x + dx) =
                                dm.block(row, q * d, 1, d);
                }
        return dh;
    }

    BackboneConfig cfg_;
    LinearSite<Scalar> patch_embed_;
    Param<Scalar> pos_embed_;
    std::vector<Block> blocks_;
    std::optional<LinearSite<Scalar>> reduction_;
    LayerNorm<Scalar> ln_final_;
    LinearSite<Scalar> head_;
};

template <typename Scalar>
Eigen::Index count_params(const ToyBackbone<Scalar>& b)
{
    Eigen::Index n = 0;
    b.for_each_param([&](const Param<Scalar>& p) { n += p.size(); });
    return n;
}

} // namespace petal
