#include <filesystem>

#include "doctest.h"
#include "refrec/harness.hpp"

using namespace refrec;
using namespace refrec::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("refrec_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("accuracy against a hand count") {
    const std::vector<int> pred = {0, 1, 1, 2, 2, 2};
    const std::vector<int> truth = {0, 1, 2, 2, 0, 2};
    const auto a = accuracy(pred, truth, 4);
    CHECK(a.overall == doctest::Approx(4.0 / 6));
    CHECK(a.per_class[0] == 0.5);
    CHECK(a.per_class[1] == 1.0);
    CHECK(a.per_class[2] == doctest::Approx(2.0 / 3));
    CHECK(a.per_class[3] == 0.0);
    CHECK(a.confusion[0][2] == 1);
    CHECK(a.confusion[2][1] == 1);
    CHECK_THROWS(accuracy(std::vector<int>{0}, std::vector<int>{0, 1}, 2));
  }

  TEST_CASE("config json round trip and overrides") {
    auto c = preset("desk");
    c.set("g=0.2");
    c.set("no_ema=true");
    c.set("emd_solver=auction");
    c.set("classes=[\"cube\",\"torus\"]");
    CHECK(c.g == 0.2);
    CHECK(c.no_ema);
    CHECK(c.emd_solver == "auction");
    CHECK(c.classes.size() == 2);
    const auto back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK_THROWS(c.set("bogus=1"));
    CHECK_THROWS(c.set("k=\"three\""));
    CHECK_THROWS(c.set("novalue"));
    CHECK_THROWS(preset("huge"));
    const auto dir = scratch("cfg");
    save_config(dir / "c.json", c);
    CHECK(load_config(dir / "c.json").to_json() == c.to_json());
    CHECK_THROWS(load_config(dir / "missing.json"));
  }

  TEST_CASE("stage hashes only track upstream keys") {
    const auto a = preset("desk");
    auto b = a;
    b.no_ema = true;
    CHECK(stage_hash(a, Stage::warmup) == stage_hash(b, Stage::warmup));
    CHECK(stage_hash(a, Stage::selftrain) != stage_hash(b, Stage::selftrain));
    b = a;
    b.points = 128;
    CHECK(stage_hash(a, Stage::data) != stage_hash(b, Stage::data));
    CHECK(stage_hash(a, Stage::refine) != stage_hash(b, Stage::refine));
  }

  TEST_CASE("csv quoting") {
    CHECK(csv_escape("plain") == "plain");
    CHECK(csv_escape("a,b") == "\"a,b\"");
    CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(csv_escape("two\nlines") == "\"two\nlines\"");
    CHECK(csv_row({"a", "b,c"}) == "a,\"b,c\"");
  }

  TEST_CASE("svg plot is well formed") {
    const auto s = svg_line_plot("t<1>", {{"a", {1.0, 2.0, 3.0}}, {"b", {3.0, 1.0}}});
    CHECK(s.find("<svg") == 0);
    CHECK(s.find("</svg>") != std::string::npos);
    CHECK(s.find("t&lt;1&gt;") != std::string::npos);
  }

  TEST_CASE("ablation axes map to flags") {
    const auto c = preset("desk");
    CHECK(with_axis(c, "offline_refine", false).no_offline_refine);
    CHECK_FALSE(with_axis(c, "offline_refine", true).no_offline_refine);
    CHECK(with_axis(c, "ema", false).no_ema);
    CHECK(with_axis(c, "single_head", true).single_head);
    CHECK_THROWS(with_axis(c, "nonsense", true));
    CHECK(ablation_axes().size() >= 6);
  }

  TEST_CASE("stages report missing and stale inputs") {
    auto c = preset("desk");
    c.classes = {"sphere", "plane"};
    c.points = 32;
    c.source_per_class = c.target_per_class = c.test_per_class = 4;
    const auto dir = scratch("stages");
    try {
      stage_refine(c, 0, dir);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("run stage gen-data first") != std::string::npos);
    }
    stage_data(c, 0, dir);
    try {
      stage_refine(c, 0, dir);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("run stage warmup first") != std::string::npos);
    }
    const auto d = load_data(c, dir);
    CHECK(d.source.size() == 8);
    CHECK(d.target.size() == 8);
    auto other = c;
    other.points = 16;
    try {
      load_data(other, dir);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("different configuration") != std::string::npos);
    }
  }

  TEST_CASE("untrained model is near chance") {
    auto c = preset("desk");
    c.test_per_class = 100;
    c.source_per_class = c.target_per_class = 2;
    const auto dir = scratch("untrained");
    stage_data(c, 0, dir);
    const auto a = stage_eval(c, 0, dir, true);
    CHECK(std::abs(a.overall - 0.25) <= 0.1);
  }

  TEST_CASE("generated data is deterministic and balanced") {
    auto c = preset("desk");
    c.points = 32;
    c.source_per_class = 3;
    c.target_per_class = 4;
    c.test_per_class = 5;
    const auto a = generate_data(c, 7), b = generate_data(c, 7);
    CHECK(a.source.size() == 12);
    CHECK(a.target.size() == 16);
    CHECK(a.test.size() == 20);
    for (size_t i = 0; i < a.target.size(); ++i) CHECK(a.target.clouds[i].points == b.target.clouds[i].points);
    const auto other = generate_data(c, 8);
    CHECK(other.target.clouds[0].points != a.target.clouds[0].points);
  }
}
