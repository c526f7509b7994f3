#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "calmargin/dataset.hpp"
#include "calmargin/error.hpp"
#include "calmargin/model.hpp"
#include "calmargin/trainer.hpp"
#include "support.hpp"

using namespace calmargin;
using namespace calmargin::testing;

namespace {

SyntheticTask small_task(std::uint64_t seed, std::size_t k = 3) {
  SyntheticTask t;
  t.seed = seed;
  t.num_classes = k;
  t.train_count = 20;
  t.val_count = 3;
  t.test_count = 3;
  return t;
}

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kValidation;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img{h, w, std::vector<double>(h * w)};
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("synthetic data is a pure function of the task") {
  const auto task = small_task(4);
  const Dataset a = generate_dataset(task), b = generate_dataset(task);
  REQUIRE(a.train.images.size() == 20);
  for (std::size_t i = 0; i < a.train.images.size(); ++i) {
    CHECK(a.train.images[i].pixels == b.train.images[i].pixels);
    CHECK(a.train.labels[i].values() == b.train.labels[i].values());
  }
  CHECK(class_histogram(a.train, 3) == class_histogram(b.train, 3));
  const Dataset c = generate_dataset(small_task(5));
  CHECK(c.train.images[0].pixels != a.train.images[0].pixels);
}

TEST_CASE("class histogram covers every pixel and every class appears in every image") {
  const Dataset d = generate_dataset(small_task(6));
  const auto hist = class_histogram(d.train, 3);
  std::size_t total = 0;
  for (auto n : hist) total += n;
  CHECK(total == 20u * 32u * 32u);
  for (const auto& y : d.train.labels) {
    std::set<std::int32_t> seen(y.values().begin(), y.values().end());
    CHECK(seen.size() == 3);
  }
}

TEST_CASE("noiseless images are separable by intensity") {
  auto task = small_task(7, 4);
  task.noise_sigma = 0.0;
  const Dataset d = generate_dataset(task);
  const auto levels = task.class_intensities();
  for (std::size_t i = 0; i < d.train.images.size(); ++i)
    for (std::size_t p = 0; p < d.train.images[i].pixels.size(); ++p)
      CHECK(d.train.images[i].pixels[p] == levels[d.train.labels[i].at(p)]);
}

TEST_CASE("gaussian perturbation") {
  std::vector<Image> flat(100, Image{32, 32, std::vector<double>(32 * 32, 0.5)});

  CHECK(perturb_gaussian(flat, 0.0, 1)[3].pixels == flat[3].pixels);

  const double sigma = 0.05;
  const auto noisy = perturb_gaussian(flat, sigma, 1);
  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& img : noisy)
    for (double v : img.pixels) {
      sum += v - 0.5;
      sq += (v - 0.5) * (v - 0.5);
      n += 1.0;
    }
  REQUIRE(n >= 1e5);
  CHECK(std::abs(sum / n) < 1e-3);
  CHECK(sq / n == doctest::Approx(sigma * sigma).epsilon(0.03));
  CHECK(perturb_gaussian(flat, sigma, 1)[7].pixels == noisy[7].pixels);
  for (const auto& img : perturb_gaussian(flat, 2.0, 3))
    for (double v : img.pixels) CHECK((v >= 0.0 && v <= 1.0));

  CHECK(code_of([&] { perturb_gaussian(flat, -0.1, 1); }) == ErrorCode::kValidation);
}

TEST_CASE("parameter count") {
  for (std::size_t r : {0u, 1u, 2u})
    for (std::size_t h : {1u, 14u, 32u})
      for (std::size_t k : {2u, 4u}) {
        const std::size_t f = (2 * r + 1) * (2 * r + 1);
        CHECK(PixelModel::parameter_count(r, h, k) == h * f + h + k * h + k);
        CHECK(PixelModel(r, h, k).parameters().size() == h * f + h + k * h + k);
      }
  CHECK(PixelModel::parameter_count(1, 14, 4) == 200);
}

TEST_CASE("whole-model gradient matches finite differences for every loss") {
  Rng rng(31);
  const std::size_t k = 4;
  PixelModel model(1, 14, k);
  for (LossKind kind : all_loss_kinds()) {
    CAPTURE(to_string(kind));
    int checked = 0;
    for (int trial = 0; trial < 20 && checked < 3; ++trial) {
      model.initialize(1000 + trial);
      // spread the output layer so logit gaps are not all tiny
      for (double& p : model.parameters()) p *= 3.0;
      std::vector<Image> images{random_image(rng, 6, 5), random_image(rng, 6, 5)};
      std::vector<LabelField> labels{random_labels(rng, 6, 5, k), random_labels(rng, 6, 5, k)};
      LossConfig cfg = random_config(rng, kind);
      bool kink = false;
      for (const auto& img : images)
        kink = kink || near_kink(model.forward(img), cfg.margin, 1e-3);
      if (kink) continue;

      const std::vector<const Image*> ip{&images[0], &images[1]};
      const std::vector<const LabelField*> lp{&labels[0], &labels[1]};
      const auto analytic = batch_gradient(model, ip, lp, cfg);
      auto f = [&](const std::vector<double>& params) {
        PixelModel m = model;
        m.set_parameters(params);
        return batch_gradient(m, ip, lp, cfg).loss;
      };
      const std::vector<double> x(model.parameters().begin(), model.parameters().end());
      const auto res = check_gradient(f, x, analytic.grad, 1e-5);
      CAPTURE(res.worst_index);
      CHECK(res.worst <= 1e-4);
      ++checked;
    }
    CHECK(checked == 3);
  }
}

TEST_CASE("schedule validation") {
  TrainSchedule s;
  CHECK_NOTHROW(s.validate());
  CHECK(s.lr_at(0) == 1e-2);
  CHECK(s.lr_at(14) == 1e-2);
  CHECK(s.lr_at(15) == 1e-3);

  auto bad = [](auto edit) {
    TrainSchedule t;
    edit(t);
    return code_of([&] { t.validate(); });
  };
  CHECK(bad([](TrainSchedule& t) { t.epochs = 0; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.batch_size = 0; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.stages = {}; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.stages = {{1, 1e-3}}; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.stages = {{0, 1e-3}, {0, 1e-4}}; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.stages = {{0, 1e-3}, {99, 1e-4}}; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.stages = {{0, -1.0}}; }) == ErrorCode::kConfig);
  CHECK(bad([](TrainSchedule& t) { t.adam.beta1 = 1.0; }) == ErrorCode::kConfig);
}

TEST_CASE("training") {
  auto task = small_task(12);
  task.train_count = 6;
  const Dataset d = generate_dataset(task);
  LossConfig ce;
  TrainSchedule s;
  s.epochs = 3;
  s.stages = {{0, 1e-2}};

  SUBCASE("is deterministic") {
    PixelModel m(1, 8, 3);
    m.initialize(2);
    const auto a = train(m, d, ce, s, 9);
    const auto b = train(m, d, ce, s, 9);
    CHECK(std::ranges::equal(a.model.parameters(), b.model.parameters()));
    for (std::size_t e = 0; e < a.log.size(); ++e) CHECK(a.log[e].train_loss == b.log[e].train_loss);
  }

  SUBCASE("lr = 0 changes nothing") {
    PixelModel m(1, 8, 3);
    m.initialize(2);
    s.stages = {{0, 0.0}};
    const auto r = train(m, d, ce, s, 9);
    CHECK(std::ranges::equal(r.model.parameters(), m.parameters()));
    for (const auto& e : r.log) CHECK(e.train_loss == r.log.front().train_loss);
    CHECK(r.log.size() == 3);
  }

  SUBCASE("a non-finite loss aborts") {
    PixelModel m(1, 8, 3);
    m.initialize(2);
    m.parameters()[0] = std::nan("");
    CHECK(code_of([&] { train(m, d, ce, s, 9); }) == ErrorCode::kNumerical);
  }

  SUBCASE("a class-count mismatch is rejected") {
    PixelModel m(1, 8, 4);
    m.initialize(2);
    CHECK(code_of([&] { train(m, d, ce, s, 9); }) == ErrorCode::kShapeMismatch);
  }
}

TEST_CASE("logit profile") {
  const Dataset d = generate_dataset(small_task(13));
  PixelModel m(1, 6, 3);
  m.initialize(4);

  SUBCASE("matches a two-pass mean") {
    const auto prof = logit_distance_profile(m, d.val);
    REQUIRE(prof.classes.size() == 3);
    CHECK(prof.omitted.empty());
    for (const auto& c : prof.classes) {
      std::vector<double> mean(3, 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < d.val.images.size(); ++i) {
        const auto l = m.forward(d.val.images[i]);
        for (std::size_t p = 0; p < l.num_pixels(); ++p) {
          if (d.val.labels[i].at(p) != c.gt_class) continue;
          for (std::size_t j = 0; j < 3; ++j) mean[j] += l.pixel(p)[j];
          ++n;
        }
      }
      CHECK(n == c.pixel_count);
      for (std::size_t j = 0; j < 3; ++j) {
        mean[j] /= static_cast<double>(n);
        CHECK(std::abs(mean[j] - c.mean_logits[j]) <= 1e-12);
      }
      const double top = *std::max_element(mean.begin(), mean.end());
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(std::abs(c.mean_distances[j] - (top - mean[j])) <= 1e-12);
    }
  }

  SUBCASE("a constant model gives identical profiles") {
    std::vector<double> p(m.parameters().size(), 0.0);
    p[p.size() - 3] = 0.4;
    p[p.size() - 2] = -1.0;
    p[p.size() - 1] = 2.5;
    m.set_parameters(p);
    const auto prof = logit_distance_profile(m, d.val);
    const std::vector<double> want{0.4, -1.0, 2.5};
    for (const auto& c : prof.classes)
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(c.mean_logits[j] == doctest::Approx(want[j]).epsilon(1e-12));
        CHECK(c.mean_distances[j] ==
              doctest::Approx(prof.classes.front().mean_distances[j]).epsilon(1e-12));
      }
  }

  SUBCASE("absent classes are listed as omitted") {
    Split s;
    s.images = {Image{4, 4, std::vector<double>(16, 0.3)}};
    std::vector<std::int32_t> y(16, 0);
    y[5] = 1;
    s.labels = {LabelField(4, 4, 3, y, 0)};
    const auto prof = logit_distance_profile(m, s);
    CHECK(prof.classes.size() == 2);
    CHECK(prof.omitted == std::vector<std::size_t>{2});
    CHECK(max_logit_distances(m, s).size() == 1);
    CHECK(max_logit_distances(m, s, true).size() == 16);
  }
}

TEST_CASE("cross-entropy learns noiseless data") {
  auto task = small_task(17, 4);
  task.noise_sigma = 0.0;
  task.train_count = 30;
  const Dataset d = generate_dataset(task);
  PixelModel m(0, 8, 4);
  m.initialize(3);
  TrainSchedule s;
  s.epochs = 40;
  s.stages = {{0, 2e-2}, {30, 5e-3}};
  const auto r = train(m, d, LossConfig{}, s, 5);

  std::size_t right = 0, total = 0;
  for (std::size_t i = 0; i < d.test.images.size(); ++i) {
    const auto pred = predict(r.model.forward(d.test.images[i]));
    for (std::size_t p = 0; p < pred.num_pixels(); ++p) {
      right += pred.at(p) == d.test.labels[i].at(p);
      ++total;
    }
  }
  CHECK(static_cast<double>(right) / static_cast<double>(total) > 0.99);
}
