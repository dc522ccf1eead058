#include <algorithm>
#include <set>

#include "doctest.h"
#include "refine_oracle.hpp"
#include "refrec/refine.hpp"

using namespace refrec;

namespace {

// Library-side view of an oracle instance; `order` fixes entry and row order.
struct Built {
  PseudoLabelState pls;
  metric::EmbeddingTable emb;
};

Built build(const oracle::OracleInstance& in, const std::vector<std::int64_t>& order) {
  Built b;
  b.pls.classes = in.classes;
  Matrix v(static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(in.vec.begin()->second.size()));
  for (size_t r = 0; r < order.size(); ++r) {
    const auto id = order[r];
    PseudoLabel p;
    p.id = id;
    p.label = in.label.at(id);
    p.confidence = 0.5;
    p.split = std::find(in.easy.begin(), in.easy.end(), id) != in.easy.end() ? SplitTag::easy : SplitTag::hard;
    b.pls.entries.push_back(p);
    for (size_t c = 0; c < in.vec.at(id).size(); ++c) v(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = in.vec.at(id)[c];
  }
  b.emb = metric::EmbeddingTable(std::move(v), order);
  return b;
}

std::map<std::int64_t, int> run_library(const oracle::OracleInstance& in, const std::vector<std::int64_t>& order, int k,
                                        std::vector<std::int64_t>* moved_out = nullptr) {
  auto b = build(in, order);
  const auto easy = b.pls.ids_with(SplitTag::easy);
  const auto hard = b.pls.ids_with(SplitTag::hard);
  int moved = 0;
  auto [er, rest] = refine::reciprocal_expand(b.pls, easy, hard, b.emb, &moved);
  const auto votes = refine::knn_vote(rest, er, b.pls, b.emb, k);
  for (const auto& v : votes) b.pls.at(v.id).label = v.label;
  if (moved_out) {
    moved_out->clear();
    for (const auto& e : b.pls.entries)
      if (e.provenance == Provenance::reciprocal) moved_out->push_back(e.id);
    std::sort(moved_out->begin(), moved_out->end());
  }
  std::map<std::int64_t, int> out;
  for (const auto& e : b.pls.entries) out[e.id] = e.label;
  return out;
}

}  // namespace

TEST_SUITE("refine") {
  TEST_CASE("easy_count") {
    CHECK(refine::easy_count(50, 0.1) == 5);
    CHECK(refine::easy_count(51, 0.1) == 6);
    CHECK(refine::easy_count(3, 0.1) == 1);
    CHECK(refine::easy_count(10, 0.1) == 1);
    CHECK(refine::easy_count(1, 0.9) == 1);
  }

  TEST_CASE("split takes the most confident per predicted class") {
    PseudoLabelState pls;
    pls.classes = 3;
    const double conf[] = {0.9, 0.5, 0.7, 0.7, 0.99, 0.6, 0.8, 0.4, 0.3, 0.95, 0.2};
    for (int i = 0; i < 11; ++i) pls.entries.push_back({i, i < 6 ? 0 : 1, conf[i], SplitTag::unassigned, Provenance::classifier});
    std::vector<std::string> warnings;
    const auto s = refine::split_easy_hard(pls, 0.4, &warnings);
    // class 0: ids 0..5, ceil(2.4) = 3 easy: 4 (0.99), 0 (0.9), then 2 and 3 tie at 0.7 -> smaller id 2.
    // class 1: ids 6..10, ceil(2.0) = 2 easy: 9, 6.
    CHECK(s.easy == std::vector<std::int64_t>{0, 2, 4, 6, 9});
    CHECK(s.hard == std::vector<std::int64_t>{1, 3, 5, 7, 8, 10});
    CHECK(warnings.size() == 1);  // class 2 has no predictions
    CHECK_THROWS(refine::split_easy_hard(pls, 0.0));
    CHECK_THROWS(refine::split_easy_hard(pls, 1.0));
  }

  TEST_CASE("reciprocal expansion and vote match brute force") {
    Rng rng(11);
    for (int t = 0; t < 60; ++t) {
      const int classes = 2 + static_cast<int>(rng.below(7));
      const int n = 5 + static_cast<int>(rng.below(150));
      const int n_easy = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n / 3 + 1)));
      const auto in = oracle::random_instance(rng, n, classes, n_easy, 1 + static_cast<int>(rng.below(4)));
      const int k = 1 + static_cast<int>(rng.below(5));
      const auto want = oracle::oracle_refine(in, k);
      std::vector<std::int64_t> order;
      for (const auto& [id, v] : in.vec) order.push_back(id);
      std::vector<std::int64_t> moved;
      CHECK(run_library(in, order, k, &moved) == want.label);
      CHECK(moved == want.moved);
      rng.shuffle(std::span<std::int64_t>(order));
      CHECK(run_library(in, order, k) == want.label);
    }
  }

  TEST_CASE("strict majority and fallback to the nearest") {
    oracle::OracleInstance in;
    in.classes = 3;
    // Easy points at x = 1 (label 0), 2 (label 1), 3 (label 2); hard at 0.
    in.vec = {{1, {1.0}}, {2, {2.0}}, {3, {3.0}}, {4, {-5.0}}, {5, {0.0}}};
    in.label = {{1, 0}, {2, 1}, {3, 2}, {4, 2}, {5, 2}};
    in.easy = {1, 2, 3};
    in.hard = {4, 5};
    // 1's nearest hard is 5 (distance 1) and 5's nearest easy is 1: 5 moves with label 0.
    const auto labels = run_library(in, {1, 2, 3, 4, 5}, 3);
    CHECK(labels.at(5) == 0);
    // 4 votes among E_r = {1, 2, 3, 5}: nearest three are 5 (0), 1 (0), 2 (1) -> majority 0.
    CHECK(labels.at(4) == 0);
    CHECK(labels == oracle::oracle_refine(in, 3).label);
    // K=2 with a 1-1 split falls back to the nearest neighbour.
    in.vec[4] = {1.6};
    auto b = build(in, {1, 2, 3, 4, 5});
    const auto v2 = refine::knn_vote({4}, {1, 2, 3}, b.pls, b.emb, 2);
    CHECK(v2[0].label == 1);
    CHECK_FALSE(v2[0].consensus);
    const auto v3 = refine::knn_vote({4}, {1, 2, 3}, b.pls, b.emb, 3);
    CHECK(v3[0].label == 1);
    CHECK_FALSE(v3[0].consensus);
  }

  TEST_CASE("k larger than E_refined is reduced with a warning") {
    oracle::OracleInstance in;
    in.classes = 2;
    in.vec = {{1, {0.0}}, {2, {5.0}}, {3, {6.0}}, {4, {7.0}}};
    in.label = {{1, 0}, {2, 1}, {3, 1}, {4, 1}};
    in.easy = {1};
    in.hard = {2, 3, 4};
    auto b = build(in, {1, 2, 3, 4});
    std::vector<std::string> w;
    int eff = 0;
    const auto votes = refine::knn_vote({3, 4}, {1, 2}, b.pls, b.emb, 5, &w, &eff);
    CHECK(eff == 2);
    CHECK(w.size() == 1);
    CHECK(votes.size() == 2);
    CHECK_THROWS(refine::knn_vote({3}, {}, b.pls, b.emb, 3));
    CHECK(refine::knn_vote({}, {}, b.pls, b.emb, 3).empty());
  }

  TEST_CASE("refine_pipeline invariants") {
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
      const int classes = 2 + static_cast<int>(rng.below(6));
      const int n = 20 + static_cast<int>(rng.below(180));
      PseudoLabelState pls;
      pls.classes = classes;
      Matrix v(n, 4);
      std::vector<std::int64_t> ids;
      for (int i = 0; i < n; ++i) {
        pls.entries.push_back({i, static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))), rng.uniform(), SplitTag::unassigned,
                               Provenance::classifier});
        for (int c = 0; c < 4; ++c) v(i, c) = rng.normal();
        ids.push_back(i);
      }
      const metric::EmbeddingTable emb(v, ids);
      refine::RefineReport rep;
      const auto out = refine::refine_pipeline(pls, emb, {0.1, 3, refine::Metric::euclidean}, &rep);
      const auto er = out.ids_with(SplitTag::easy_refined);
      const auto hr = out.ids_with(SplitTag::hard_refined);
      CHECK(er.size() + hr.size() == static_cast<size_t>(n));
      CHECK(rep.voted == static_cast<int>(hr.size()));
      // Every easy sample keeps its label.
      const auto split = [&] {
        auto copy = pls;
        return refine::split_easy_hard(copy, 0.1);
      }();
      for (auto id : split.easy) {
        CHECK(out.at(id).label == pls.at(id).label);
        CHECK(out.at(id).provenance == Provenance::classifier);
      }
      CHECK(static_cast<int>(er.size()) == static_cast<int>(split.easy.size()) + rep.moved_by_reciprocal);
      // Idempotent on the same input.
      const auto again = refine::refine_pipeline(pls, emb, {0.1, 3, refine::Metric::euclidean});
      for (size_t i = 0; i < out.entries.size(); ++i) CHECK(again.entries[i].label == out.entries[i].label);
      // Cosine refinement equals Euclidean refinement on unit rows.
      const auto cos = refine::refine_pipeline(pls, emb, {0.1, 3, refine::Metric::cosine});
      const auto euc_unit = refine::refine_pipeline(pls, refine::unit_rows(emb), {0.1, 3, refine::Metric::euclidean});
      for (size_t i = 0; i < out.entries.size(); ++i) CHECK(cos.entries[i].label == euc_unit.entries[i].label);
    }
  }

  TEST_CASE("split_only keeps labels") {
    PseudoLabelState pls;
    pls.classes = 2;
    for (int i = 0; i < 20; ++i) pls.entries.push_back({i, i % 2, 0.05 * i, SplitTag::unassigned, Provenance::classifier});
    const auto out = refine::split_only(pls, 0.1);
    for (int i = 0; i < 20; ++i) {
      CHECK(out.at(i).label == i % 2);
      CHECK((out.at(i).split == SplitTag::easy_refined || out.at(i).split == SplitTag::hard_refined));
    }
    CHECK(out.ids_with(SplitTag::easy_refined) == std::vector<std::int64_t>{18, 19});
  }
}
