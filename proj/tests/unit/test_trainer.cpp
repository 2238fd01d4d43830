#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>

#include "dmtnet/losses.hpp"
#include "dmtnet/metrics.hpp"
#include "dmtnet/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dmtnet;
using dmtnet::testing::bit_equal;
using dmtnet::testing::TempDir;
using dmtnet::testing::tiny_network;

namespace {

using dmtnet::testing::Toy;

train::TrainSetup tiny_setup(int64_t t_max, std::uint64_t seed = 0) {
  train::TrainSetup s;
  s.network = tiny_network();
  s.options.t_max = t_max;
  s.options.batch_size = 2;
  s.options.crop_size = 32;
  s.options.seed = seed;
  s.schedule.lr0 = 1e-3;
  return s;
}

train::TrainingData tiny_data(bool unlabeled = true) {
  train::TrainingData d;
  d.labeled = dmtnet::testing::small_labeled_set(2, 40, 1, 2);
  if (unlabeled) {
    for (const auto& s : dmtnet::testing::small_labeled_set(2, 40, 2, 1)) d.unlabeled.push_back({s.id, s.hazy});
  }
  return d;
}

bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
  auto pa = a.named_parameters();
  for (const auto& item : b.named_parameters()) {
    if (!torch::equal(pa[item.key()], item.value())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("poly learning rate") {
  train::Schedule s;
  CHECK(train::poly_lr(0, 100, s) == 1e-4);
  CHECK(train::poly_lr(100, 100, s) == 0.0);
  CHECK(train::poly_lr(50, 100, s) == doctest::Approx(5.358867312681466e-05).epsilon(1e-12));
}

TEST_CASE("ema update arithmetic") {
  Toy teacher(std::vector<double>{1.0, 1.0}), student(std::vector<double>{0.0, 2.0});
  train::ema_update(*teacher, *student, 0.99);
  CHECK(teacher->w[0].item<double>() == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(teacher->w[1].item<double>() == doctest::Approx(1.01).epsilon(1e-15));
  Toy same(std::vector<double>{0.3, 0.4});
  Toy same_student(std::vector<double>{0.3, 0.4});
  train::ema_update(*same, *same_student, 0.99);
  CHECK(torch::equal(same->w, same_student->w));
  train::ema_update(*teacher, *student, 0.0);
  CHECK(torch::equal(teacher->w, student->w));
  Toy wrong(std::vector<double>{1.0, 2.0, 3.0});
  CHECK_THROWS_WITH_AS(train::ema_update(*wrong, *student, 0.5), doctest::Contains("'w'"), std::invalid_argument);
  CHECK_THROWS(train::ema_update(*teacher, *student, 1.0));
}

TEST_CASE("ema trajectory follows the closed form") {
  CHECK(dmtnet::testing::ema_closed_form_error(100, 0.99) <= 1e-10);
  CHECK(dmtnet::testing::ema_closed_form_error(30, 0.5) <= 1e-12);
}

TEST_CASE("train state starts with teacher equal to student") {
  train::TrainState state(tiny_setup(5));
  CHECK(same_parameters(*state.teacher(), *state.student()));
  for (const auto& p : state.teacher()->parameters()) CHECK(!p.requires_grad());
  CHECK(state.iteration() == 0);
  CHECK(state.teacher_only_ema_mutated());
}

TEST_CASE("a train step mutates student, teacher and the counter") {
  train::TrainState state(tiny_setup(5));
  auto data = tiny_data();
  auto student_before = net::DidNet(tiny_network());
  net::copy_parameters(*student_before, *state.student());
  auto teacher_before = net::DidNet(tiny_network());
  net::copy_parameters(*teacher_before, *state.teacher());
  const auto batch = train::next_batch(state, data);
  CHECK(batch.labeled.size() == 1);
  CHECK(batch.unlabeled.size() == 1);
  const auto bd = train::train_step(state, batch, loss::LossWeights{});
  CHECK(state.iteration() == 1);
  CHECK(!same_parameters(*state.student(), *student_before));
  CHECK(!same_parameters(*state.teacher(), *teacher_before));
  CHECK(bd.mu == loss::rampup_weight(0, 5, 1.0));
  CHECK(bd.n_labeled == 1);
  CHECK(bd.n_unlabeled == 1);
  CHECK(state.teacher_only_ema_mutated());
  CHECK(state.ema_updates() == 1);
  for (const auto& p : state.teacher()->parameters()) CHECK(!p.grad().defined());
}

TEST_CASE("mu applied by train_step follows the ramp-up") {
  train::TrainState state(tiny_setup(6));
  auto data = tiny_data();
  loss::LossWeights w;
  w.mu_max = 2.0;
  for (int64_t t = 0; t < 6; ++t) {
    const auto bd = train::train_step(state, train::next_batch(state, data), w);
    CHECK(bd.mu == loss::rampup_weight(t, 6, 2.0));
  }
  CHECK_THROWS_AS(train::train_step(state, train::next_batch(state, data), w), std::logic_error);
}

TEST_CASE("mu forced to zero: the teacher still moves but adds no gradient") {
  auto setup = tiny_setup(3);
  setup.options.mu_override = 0.0;
  train::TrainState a(setup);
  auto data = tiny_data();
  const auto batch = train::next_batch(a, data);
  // The same step without the unlabeled half must give the same student.
  auto setup_b = setup;
  setup_b.options.use_unlabeled = false;
  train::TrainState b(setup_b);
  net::copy_parameters(*b.student(), *a.student());
  auto teacher_before = net::DidNet(tiny_network());
  net::copy_parameters(*teacher_before, *a.teacher());
  train::train_step(a, batch, loss::LossWeights{});
  train::train_step(b, batch, loss::LossWeights{});
  CHECK(same_parameters(*a.student(), *b.student()));
  CHECK(!same_parameters(*a.teacher(), *teacher_before));
  CHECK(a.teacher_only_ema_mutated());
}

TEST_CASE("non-finite loss aborts with a breakdown") {
  train::TrainState state(tiny_setup(3));
  auto data = tiny_data(false);
  auto batch = train::next_batch(state, data);
  batch.labeled[0].clean = torch::full_like(batch.labeled[0].clean, NAN);
  try {
    train::train_step(state, batch, loss::LossWeights{});
    FAIL("expected NonFiniteLossError");
  } catch (const train::NonFiniteLossError& e) {
    CHECK(!e.breakdown().all_finite());
    CHECK(std::string(e.what()).find("l_j") != std::string::npos);
  }
  CHECK(state.iteration() == 0);
}

TEST_CASE("labeled-only training lowers the moving-average loss") {
  auto setup = tiny_setup(200, 4);
  setup.options.batch_size = 4;
  setup.options.use_unlabeled = false;
  train::TrainState state(setup);
  train::TrainingData data;
  data.labeled = dmtnet::testing::small_labeled_set(1, 40, 5, 4);
  std::vector<double> losses;
  train::TrainHooks hooks;
  hooks.on_step = [&](const loss::LossBreakdown& bd, const train::TrainState&) {
    losses.push_back(bd.supervised_total);
  };
  train::train_loop(state, data, loss::LossWeights{}, hooks);
  REQUIRE(losses.size() == 200);
  auto window = [&](size_t from) {
    double s = 0;
    for (size_t i = from; i < from + 10; ++i) s += losses[i];
    return s / 10;
  };
  MESSAGE("moving average " << window(0) << " -> " << window(190));
  CHECK(window(190) < window(0));
}

TEST_CASE("train loop hooks fire on their intervals; t_max=0 is a no-op") {
  train::TrainState empty(tiny_setup(0));
  auto data = tiny_data();
  int calls = 0;
  train::TrainHooks hooks;
  hooks.on_step = [&](const loss::LossBreakdown&, const train::TrainState&) { ++calls; };
  train::train_loop(empty, data, loss::LossWeights{}, hooks);
  CHECK(calls == 0);
  CHECK(empty.iteration() == 0);

  train::TrainState state(tiny_setup(7));
  std::vector<int64_t> checkpoints, validations;
  hooks.checkpoint_every = 3;
  hooks.checkpoint = [&](const train::TrainState& s) { checkpoints.push_back(s.iteration()); };
  hooks.validate_every = 2;
  hooks.validate = [&](const train::TrainState& s) { validations.push_back(s.iteration()); };
  train::train_loop(state, data, loss::LossWeights{}, hooks);
  CHECK(calls == 7);
  CHECK(checkpoints == std::vector<int64_t>{3, 6});
  CHECK(validations == std::vector<int64_t>{2, 4, 6});
}

TEST_CASE("checkpoint failures are retried once") {
  auto data = tiny_data();
  train::TrainState state(tiny_setup(2));
  int attempts = 0;
  train::TrainHooks hooks;
  hooks.checkpoint_every = 1;
  hooks.checkpoint = [&](const train::TrainState&) {
    if (++attempts == 1) throw std::runtime_error("disk full");
  };
  train::train_loop(state, data, loss::LossWeights{}, hooks);
  CHECK(attempts == 3);
  CHECK(state.iteration() == 2);

  train::TrainState failing(tiny_setup(2));
  hooks.checkpoint = [](const train::TrainState&) { throw std::runtime_error("disk full"); };
  CHECK_THROWS_AS(train::train_loop(failing, data, loss::LossWeights{}, hooks), train::CheckpointError);
  CHECK(failing.iteration() == 1);
}

TEST_CASE("resume reproduces the uninterrupted trajectory bit for bit") {
  TempDir dir("resume");
  auto data = tiny_data();
  std::vector<double> full_losses, resumed_losses;
  train::TrainState full(tiny_setup(8, 3));
  train::TrainHooks hooks;
  hooks.checkpoint_every = 4;
  hooks.checkpoint = [&](const train::TrainState& s) {
    if (s.iteration() == 4) s.save(dir / "mid.pt");
  };
  hooks.on_step = [&](const loss::LossBreakdown& bd, const train::TrainState&) {
    full_losses.push_back(bd.grand_total);
  };
  train::train_loop(full, data, loss::LossWeights{}, hooks);

  auto resumed = train::TrainState::load(dir / "mid.pt");
  CHECK(resumed.iteration() == 4);
  CHECK(resumed.teacher_only_ema_mutated());
  train::TrainHooks hooks2;
  hooks2.on_step = [&](const loss::LossBreakdown& bd, const train::TrainState&) {
    resumed_losses.push_back(bd.grand_total);
  };
  train::train_loop(resumed, data, loss::LossWeights{}, hooks2);
  REQUIRE(resumed_losses.size() == 4);
  for (size_t i = 0; i < 4; ++i) CHECK(resumed_losses[i] == full_losses[4 + i]);
  CHECK(same_parameters(*resumed.student(), *full.student()));
  CHECK(same_parameters(*resumed.teacher(), *full.teacher()));
}

TEST_CASE("checkpoint loading rejects garbage") {
  TempDir dir("badckpt");
  CHECK_THROWS_AS(train::TrainState::load(dir / "absent.pt"), train::CheckpointError);
  std::ofstream(dir / "junk.pt") << "junk";
  CHECK_THROWS_AS(train::TrainState::load(dir / "junk.pt"), train::CheckpointError);
}

TEST_CASE("inference keeps the input size and is deterministic") {
  train::TrainState state(tiny_setup(1));
  auto image = torch::rand({3, 45, 70});
  auto a = train::infer(state, image);
  auto b = train::infer(state, image);
  CHECK(a.sizes() == image.sizes());
  CHECK(bit_equal(a, b));
  CHECK(a.min().item<double>() >= 0.0);
  CHECK(a.max().item<double>() <= 1.0);
}

TEST_CASE("sync_teacher copies the student") {
  train::TrainState state(tiny_setup(2));
  {
    torch::NoGradGuard guard;
    for (auto& p : state.student()->parameters()) p.add_(1.0);
  }
  CHECK(!same_parameters(*state.teacher(), *state.student()));
  state.sync_teacher();
  CHECK(same_parameters(*state.teacher(), *state.student()));
  CHECK(state.teacher_only_ema_mutated());
}

TEST_CASE("train options validation") {
  auto s = tiny_setup(2);
  s.options.batch_size = 3;
  CHECK_THROWS(train::TrainState(s));
  s = tiny_setup(2);
  s.options.crop_size = 16;
  CHECK_THROWS(train::TrainState(s));
  s = tiny_setup(2);
  s.schedule.ema_decay = 1.0;
  CHECK_THROWS(train::TrainState(s));
  CHECK_THROWS(train::train_options_from_json(nlohmann::json::object()));
}
