#include "doctest.h"
#include "gradcheck.hpp"
#include "refrec/refine.hpp"
#include "refrec/selftrain.hpp"
#include "refrec/warmup.hpp"

using namespace refrec;

namespace {

struct Tiny {
  SourceSet source;
  TargetSet target;
  TargetTruth truth;
  warmup::WarmupConfig cfg;
};

Tiny tiny(int per_class = 6) {
  Tiny t;
  geometry::DomainSpec s{{"sphere", "plane"}, {}, per_class, 32, 1, geometry::Domain::source};
  geometry::DomainSpec g{{"sphere", "plane"}, {0.25, 0.5, 0.02, 2.0}, per_class, 32, 2, geometry::Domain::target};
  t.source = make_source(geometry::generate_domain(s));
  std::tie(t.target, t.truth) = make_target(geometry::generate_domain(g));
  t.cfg.model.encoder_widths = {16, 16};
  t.cfg.model.decoder_widths = {32, 32};
  t.cfg.model.head_hidden = 8;
  t.cfg.model.classes = 2;
  t.cfg.model.points = 32;
  t.cfg.batch_size = 4;
  t.cfg.lr = 1e-2;
  t.cfg.val_fraction = 0.2;
  return t;
}

}  // namespace

TEST_SUITE("warmup") {
  TEST_CASE("cross entropy closed form and gradient") {
    Matrix l(2, 3);
    l << 0.0, 0.0, 0.0, 1.0, 2.0, 3.0;
    const std::vector<int> y = {1, 2};
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    const double want = (std::log(3.0) + lse - 3.0) / 2.0;
    CHECK(std::abs(warmup::cross_entropy(ad::Value::constant(l), y, {}, 2.0).item() - want) < 1e-12);
    const std::vector<double> w = {0.0, 2.0};
    CHECK(std::abs(warmup::cross_entropy(ad::Value::constant(l), y, w, 4.0).item() - (lse - 3.0) / 2.0) < 1e-12);
    Rng rng(1);
    auto p = ad::Value::parameter(testing::random_matrix(2, 3, rng));
    auto f = [&](const std::vector<ad::Value>& v) { return warmup::cross_entropy(v[0], y, {}, 2.0); };
    CHECK(testing::gradcheck(f, {p}).rel_error < 1e-4);
  }

  TEST_CASE("reconstruction loss decreases") {
    auto t = tiny();
    t.cfg.recon_epochs = 8;
    const auto r = warmup::pretrain_reconstruction(t.source, t.target, t.cfg);
    REQUIRE(r.history.size() == 8);
    CHECK(r.history.back().loss < r.history.front().loss);
  }

  TEST_CASE("classifier fits a separable source set") {
    auto t = tiny(10);
    t.cfg.cls_epochs = 15;
    t.cfg.synthetic_to_real = false;
    t.cfg.transfer = false;
    Rng rng(3);
    const auto enc = model::EncoderParams::init(t.cfg.model, rng);
    const auto c = warmup::train_source_classifier(enc, t.source, t.cfg);
    CHECK(c.history.back().accuracy > 0.5);
    CHECK(c.best_val_accuracy >= 0.5);
    CHECK(c.best_epoch >= 0);
  }

  TEST_CASE("training stages never read target truth") {
    auto t = tiny();
    t.cfg.recon_epochs = 1;
    t.cfg.cls_epochs = 1;
    const long before = TargetTruth::access_count();
    const auto r = warmup::pretrain_reconstruction(t.source, t.target, t.cfg);
    const auto c = warmup::train_source_classifier(r.encoder, t.source, t.cfg);
    const auto pls = warmup::emit_initial_pseudolabels(c.encoder, c.head, t.target);
    CHECK(pls.size() == t.target.size());
    CHECK_NOTHROW(pls.validate());
    const metric::EmbeddingTable emb(model::encode_all(r.encoder, t.target.clouds), t.target.ids);
    const auto refined = refine::refine_pipeline(pls, emb, {0.1, 3, refine::Metric::euclidean});
    selftrain::SelfTrainConfig sc;
    sc.model = t.cfg.model;
    sc.epochs = 1;
    sc.batch_size = 4;
    sc.val_fraction = 0.2;
    const auto st = selftrain::selftrain_loop(t.source, t.target, refined, r.encoder, sc);
    CHECK(st.iterations.size() == 3);
    CHECK(TargetTruth::access_count() == before);
  }
}
