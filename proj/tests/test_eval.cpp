#include <doctest.h>

#include <random>

#include "lfyolo/errors.hpp"
#include "lfyolo/eval.hpp"
#include "support.hpp"

using namespace lfyolo;

namespace {

// A box with IoU exactly `v` against (0, 0, 10, 10): same height, shifted
// right by s where (10 - s) / (10 + s) = v.
Box shifted(double v) {
  const double s = 10.0 * (1.0 - v) / (1.0 + v);
  return Box{s, 0, 10 + s, 10};
}

std::vector<EvalRecord> random_instance(std::mt19937_64& rng, int classes) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<EvalRecord> records(1 + rng() % 3);
  for (auto& r : records) {
    const int gts = static_cast<int>(rng() % 6);
    for (int g = 0; g < gts; ++g) {
      const double x = u(rng) * 60, y = u(rng) * 60;
      r.truths.push_back({static_cast<int>(rng() % classes), Box{x, y, x + 10 + u(rng) * 20, y + 10 + u(rng) * 20}});
    }
    const int dets = static_cast<int>(rng() % 11);
    for (int d = 0; d < dets; ++d) {
      Box b;
      if (!r.truths.empty() && u(rng) < 0.7) {
        const Box t = r.truths[rng() % r.truths.size()].box;
        const double j = (u(rng) - 0.5) * 0.6 * t.width();
        b = Box{t.x_min + j, t.y_min + j * 0.5, t.x_max + j, t.y_max};
      } else {
        const double x = u(rng) * 60, y = u(rng) * 60;
        b = Box{x, y, x + 5 + u(rng) * 20, y + 5 + u(rng) * 20};
      }
      r.detections.push_back({static_cast<int>(rng() % classes), u(rng), b});
    }
  }
  return records;
}

}  // namespace

TEST_CASE("match examples") {
  const Box gt{0, 0, 10, 10};
  const std::vector<Box> truths{gt};
  std::vector<Detection> one{{0, 0.9, shifted(0.6)}};
  CHECK(match(one, truths) == std::vector<bool>{true});

  std::vector<Detection> two{{0, 0.6, gt}, {0, 0.8, shifted(0.9)}};
  CHECK(match(two, truths) == std::vector<bool>{false, true});

  const Box half{0, 0, 10, 5};
  CHECK(iou(half, gt) == 0.5);
  std::vector<Detection> exact{{0, 0.9, half}};
  CHECK(match(exact, truths) == std::vector<bool>{true});
  std::vector<Detection> below{{0, 0.9, Box{0, 0, 10, 4.999}}};
  CHECK(match(below, truths) == std::vector<bool>{false});
}

TEST_CASE("detections claim the best unmatched truth") {
  const std::vector<Box> truths{{0, 0, 10, 10}, {2, 0, 12, 10}};
  std::vector<Detection> dets{{0, 0.9, Box{1, 0, 11, 10}}, {0, 0.8, Box{1, 0, 11, 10}}};
  CHECK(match(dets, truths) == std::vector<bool>{true, true});
}

TEST_CASE("average precision examples") {
  CHECK(average_precision({true}, 1) == 1.0);
  CHECK(average_precision({}, 3) == 0.0);
  CHECK(average_precision({true, false, true}, 2) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(average_precision({false, true}, 1) == 0.5);
  CHECK_THROWS_AS(average_precision({true}, 0), ValidationError);
}

TEST_CASE("ap50 over records") {
  const Box gt{0, 0, 10, 10};
  std::vector<EvalRecord> records(2);
  records[0].truths = {{0, gt}};
  records[0].detections = {{0, 0.9, gt}, {0, 0.5, Box{30, 30, 40, 40}}};
  records[1].truths = {{0, gt}};
  records[1].detections = {{0, 0.7, gt}};
  // Pooled ranking: TP(0.9), TP(0.7), FP(0.5).
  CHECK(*ap50(records, 0) == 1.0);
  CHECK(!ap50(records, 1).has_value());
  records[1].detections.clear();
  CHECK(*ap50(records, 0) == 0.5);
}

TEST_CASE("map50 examples") {
  const Box gt{0, 0, 10, 10};
  std::vector<EvalRecord> records(1);
  records[0].truths = {{0, gt}, {1, Box{20, 20, 30, 30}}};
  records[0].detections = {{0, 0.9, gt}, {1, 0.9, Box{50, 50, 60, 60}}, {1, 0.8, Box{20, 20, 30, 30}}};
  const MapResult r = map50(records, 3);
  CHECK(*r.per_class[0] == 1.0);
  CHECK(*r.per_class[1] == 0.5);
  CHECK(!r.per_class[2].has_value());
  CHECK(r.evaluated_classes == 2);
  CHECK(r.map == 0.75);

  std::vector<EvalRecord> perfect(1);
  perfect[0].truths = {{0, gt}, {2, Box{20, 20, 30, 30}}};
  perfect[0].detections = {{0, 0.3, gt}, {2, 0.4, Box{20, 20, 30, 30}}};
  CHECK(map50(perfect, 3).map == 1.0);

  std::vector<EvalRecord> none(1);
  none[0].detections = {{0, 0.5, gt}};
  CHECK_THROWS_AS(map50(none, 3), ValidationError);

  const std::string table = render_map_table(r);
  CHECK(table.find("mAP50   0.7500") != std::string::npos);
  CHECK(table.find("2       -") != std::string::npos);
  CHECK(render_map_csv(r) == "class,AP50\n0,1.0000\n1,0.5000\n2,\nmAP50,0.7500\n");
}

TEST_CASE("ap50 equals the threshold-enumeration evaluator exactly") {
  std::mt19937_64 rng(41);
  int compared = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto records = random_instance(rng, 2);
    for (int c = 0; c < 2; ++c) {
      const double brute = testsupport::brute_force_ap(records, c);
      const auto ap = ap50(records, c);
      if (brute < 0) {
        CHECK(!ap.has_value());
        continue;
      }
      REQUIRE(ap.has_value());
      CHECK(*ap == brute);
      ++compared;
    }
  }
  CHECK(compared > 500);
}

TEST_CASE("ap is rank-only and monotone under added detections") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    auto records = random_instance(rng, 1);
    const auto base = ap50(records, 0);
    if (!base) continue;

    auto rescaled = records;
    for (auto& r : rescaled)
      for (auto& d : r.detections) d.score = 0.1 + 0.5 * d.score * d.score * d.score;
    CHECK(*ap50(rescaled, 0) == *base);

    auto with_fp = records;
    with_fp[0].detections.push_back({0, -1.0, Box{500, 500, 510, 510}});
    CHECK(*ap50(with_fp, 0) <= *base);

    auto with_tp = records;
    const Box fresh{1000, 1000, 1010, 1010};
    with_tp[0].truths.push_back({0, fresh});
    const double without = *ap50(with_tp, 0);
    with_tp[0].detections.push_back({0, 2.0, fresh});
    CHECK(*ap50(with_tp, 0) >= without);
  }
}

TEST_CASE("map50 equals the mean of independently computed class APs") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const auto records = random_instance(rng, 3);
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < 3; ++c) {
      const double ap = testsupport::brute_force_ap(records, c);
      if (ap >= 0) {
        sum += ap;
        ++n;
      }
    }
    if (n == 0) {
      CHECK_THROWS_AS(map50(records, 3), ValidationError);
      continue;
    }
    const MapResult r = map50(records, 3);
    CHECK(r.evaluated_classes == n);
    CHECK(r.map == doctest::Approx(sum / n).epsilon(1e-15));
  }
}
