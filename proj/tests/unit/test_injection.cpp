#include "doctest.h"

#include "fixtures.hpp"
#include "petal/injection.hpp"

using namespace petal;

TEST_SUITE("injection")
{
    TEST_CASE("recommended placement on the default backbone")
    {
        const ToyBackbone<float> b(BackboneConfig{}, 1);
        const auto m = inject(b, InjectionConfig::recommended(), std::nullopt, 2);
        const ParamCount c = m.count_trainable();
        CHECK(c.trainable == 9728);
        CHECK(c.total == 171712);
        ToyBackbone<float> copy = b;
        CHECK(expected_adapter_params(copy, InjectionConfig::recommended()) == 9728);
    }

    TEST_CASE("rank sweep scales linearly; presets nest")
    {
        ToyBackbone<float> b(BackboneConfig{}, 1);
        auto count = [&](const char* preset, int r) {
            InjectionConfig c = InjectionConfig::preset(preset);
            c.rank = r;
            return inject(b, c, std::nullopt, 2).count_trainable().trainable;
        };
        CHECK(count("recommended", 4) == 2 * count("recommended", 2));
        CHECK(count("recommended", 8) == 4 * count("recommended", 2));
        CHECK(count("attention", 8) < count("attention+feature", 8));
        CHECK(count("attention+feature", 8) == count("recommended", 8));
        CHECK(count("all", 8) > count("attention+mlp", 8));
        CHECK_THROWS_AS(InjectionConfig::preset("everything"), ConfigError);
    }

    TEST_CASE("single and none modes")
    {
        ToyBackbone<float> b(BackboneConfig{}, 1);
        InjectionConfig c = InjectionConfig::recommended();
        c.mode = AdapterMode::single;
        CHECK(inject(b, c, std::nullopt, 2).count_trainable().trainable == 9728 / 2);
        c.mode = AdapterMode::none;
        const auto m = inject(b, c, std::nullopt, 2);
        CHECK(m.count_trainable().trainable == 0);
        CHECK_FALSE(m.gated());
    }

    TEST_CASE("missing site and invalid configs are config errors")
    {
        BackboneConfig bc;
        bc.depth = 1; // no token-merge layer
        ToyBackbone<float> b(bc, 1);
        CHECK_THROWS_AS(inject(b, InjectionConfig::preset("attention+patch"), std::nullopt, 2), ConfigError);
        InjectionConfig dup = InjectionConfig::recommended();
        dup.sites.push_back(Site::attention_qkv);
        CHECK_THROWS_AS(dup.validate(), ConfigError);
        InjectionConfig big = InjectionConfig::recommended();
        big.rank = 97;
        CHECK_THROWS_AS(inject(ToyBackbone<float>(BackboneConfig{}, 1), big, std::nullopt, 2), ConfigError);
    }

    TEST_CASE("base is frozen, adapters trainable, names are stable")
    {
        auto m = inject(ToyBackbone<float>(BackboneConfig{}, 1), InjectionConfig::recommended(), std::nullopt, 2);
        int adapters = 0;
        m.backbone().for_each_param([&](const Param<float>& p) {
            const bool is_adapter = p.name.find(".adapter_") != std::string::npos;
            CHECK(p.trainable == is_adapter);
            adapters += is_adapter;
        });
        int sites = 0;
        for (auto& [kind, site] : m.backbone().injectable()) {
            CHECK(site->adapted() == m.config().has_site(kind));
            sites += site->adapted();
        }
        CHECK(adapters == 4 * sites);
        const auto* site = m.backbone().find_site("blocks.0.attn.qkv");
        REQUIRE(site != nullptr);
        CHECK(site->twin().adapter_hi.down.name == "blocks.0.attn.qkv.adapter_hi.down");
    }

    TEST_CASE("injection seeds are per layer and reproducible")
    {
        const ToyBackbone<float> b(BackboneConfig{}, 1);
        auto m1 = inject(b, InjectionConfig::recommended(), std::nullopt, 2);
        auto m2 = inject(b, InjectionConfig::preset("attention"), std::nullopt, 2);
        const auto& a1 = m1.backbone().find_site("blocks.1.attn.qkv")->twin().adapter_lo->down.value;
        const auto& a2 = m2.backbone().find_site("blocks.1.attn.qkv")->twin().adapter_lo->down.value;
        CHECK(a1 == a2);
        const auto& hi = m1.backbone().find_site("blocks.1.attn.qkv")->twin().adapter_hi.down.value;
        CHECK(hi != a1);
    }

    TEST_CASE("strip returns the pristine backbone once")
    {
        const ToyBackbone<float> b(BackboneConfig{}, 1);
        auto m = inject(b, InjectionConfig::preset("all"), std::nullopt, 2);
        fixture::perturb_adapters(m, 3);
        const Mat<float> x = gaussian_matrix<float>(2, BackboneConfig{}.pixels(), 0.3, 5);
        const Vec<float> one = Vec<float>::Ones(2);
        CHECK(m.forward(x, one) != b.forward(x, one));
        const ToyBackbone<float> s = m.strip();
        CHECK(s.forward(x, one) == b.forward(x, one));
        CHECK(m.stripped());
        CHECK_FALSE(m.gated());
        CHECK_THROWS_AS(m.strip(), StateError);
    }

    TEST_CASE("gated model needs a gate; ungated returns unit weights")
    {
        std::vector<Image> imgs(2, Image(64, 64, 1, 0.5f));
        const auto twin = inject(ToyBackbone<float>(BackboneConfig{}, 1), InjectionConfig::recommended(), std::nullopt, 2);
        CHECK_THROWS_AS(twin.alpha(imgs), StateError);
        InjectionConfig single = InjectionConfig::recommended();
        single.mode = AdapterMode::single;
        const auto m = inject(ToyBackbone<float>(BackboneConfig{}, 1), single, std::nullopt, 2);
        CHECK(m.alpha(imgs) == Vec<float>::Ones(2));
    }

    TEST_CASE("digest ignores site order and dropout, tracks everything else")
    {
        const BackboneConfig bc;
        InjectionConfig a = InjectionConfig::recommended();
        InjectionConfig b = a;
        std::reverse(b.sites.begin(), b.sites.end());
        b.dropout_rate = 0.3;
        CHECK(injection_digest(a, bc) == injection_digest(b, bc));
        b.rank = 4;
        CHECK(injection_digest(a, bc) != injection_digest(b, bc));
        InjectionConfig c = a;
        c.mode = AdapterMode::single;
        CHECK(injection_digest(a, bc) != injection_digest(c, bc));
        BackboneConfig wide = bc;
        wide.embed_dim = 64;
        CHECK(injection_digest(a, bc) != injection_digest(a, wide));
    }

    TEST_CASE("backbone forward shape and determinism")
    {
        const BackboneConfig bc = fixture::tiny_backbone();
        const ToyBackbone<double> b(bc, 9), b2(bc, 9);
        const Mat<double> x = gaussian_matrix<double>(3, bc.pixels(), 1.0, 1);
        const Mat<double> y = b.forward(x, Vec<double>::Ones(3));
        CHECK(y.rows() == 3);
        CHECK(y.cols() == bc.feature_dim);
        CHECK(y == b2.forward(x, Vec<double>::Ones(3)));
        CHECK_THROWS_AS(b.forward(Mat<double>::Zero(3, 5), Vec<double>::Ones(3)), DimensionError);
    }
}
