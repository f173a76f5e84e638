#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpke/trainer.hpp"

using namespace dpke;

namespace {

TrainerConfig tiny_config() {
  TrainerConfig c;
  c.arch.num_points = 192;
  c.arch.num_seeds = 32;
  c.arch.num_proposals = 12;
  c.arch.knn = 8;
  c.arch.seed_width = 8;
  c.arch.proposal_width = 12;
  c.epochs_pretrain = 2;
  c.epochs_semi = 3;
  c.aug_epochs = 2;
  c.batch_labeled = 2;
  c.batch_unlabeled = 2;
  c.lr_decay_epochs = {1, 2};
  c.m0 = 64;
  c.seed = 11;
  return c;
}

struct Corpus {
  std::vector<Scene> scenes;
  std::vector<const Scene*> labeled, unlabeled;
};

Corpus tiny_corpus(std::size_t n = 10, std::size_t n_labeled = 4) {
  Corpus c;
  GeneratorConfig g = default_generator_config();
  c.scenes = generate_dataset(g, n, 21);
  for (std::size_t i = 0; i < n; ++i) (i < n_labeled ? c.labeled : c.unlabeled).push_back(&c.scenes[i]);
  return c;
}

std::string log_text(const TrainLog& log) {
  std::ostringstream os;
  write_train_log(os, log);
  return os.str();
}

std::string ckpt_bytes(const ModelParams& p) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, p);
  return os.str();
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainerConfig c;
  c.lr = 0.01;
  c.lr_decay_epochs = {2, 4};
  c.lr_decay_factor = 0.5;
  CHECK(learning_rate(c, 0) == 0.01);
  CHECK(learning_rate(c, 1) == 0.01);
  CHECK(learning_rate(c, 2) == 0.005);
  CHECK(learning_rate(c, 3) == 0.005);
  CHECK(learning_rate(c, 4) == 0.0025);
  CHECK(learning_rate(c, 100) == 0.0025);
}

TEST_CASE("trainer config validation") {
  CHECK_NOTHROW(validate_trainer_config(TrainerConfig{}));
  auto bad = [](auto mutate) {
    TrainerConfig c;
    mutate(c);
    CHECK_THROWS_AS(validate_trainer_config(c), std::invalid_argument);
  };
  bad([](TrainerConfig& c) { c.tau_obj = 1.5; });
  bad([](TrainerConfig& c) { c.strict.iou = -0.1; });
  bad([](TrainerConfig& c) { c.ema_alpha = 2.0; });
  bad([](TrainerConfig& c) { c.aug_epochs = c.epochs_semi + 1; });
  bad([](TrainerConfig& c) { c.batch_labeled = 0; });
  bad([](TrainerConfig& c) { c.epochs_pretrain = -1; });
  bad([](TrainerConfig& c) { c.m0 = 0; });
  bad([](TrainerConfig& c) { c.lr = 0.0; });
  bad([](TrainerConfig& c) { c.arch.num_proposals = 0; });
}

TEST_CASE("pretraining is deterministic and zero epochs returns the initialization") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig c = tiny_config();
  TrainLog l1, l2;
  const ModelParams a = pretrain(c, corpus.labeled, &l1);
  const ModelParams b = pretrain(c, corpus.labeled, &l2);
  CHECK(a == b);
  CHECK(log_text(l1) == log_text(l2));
  CHECK(l1.size() == 4);  // 2 epochs x 2 batches
  CHECK(l1.front().loss.total > 0.0);

  c.seed = 12;
  CHECK_FALSE(pretrain(c, corpus.labeled) == a);

  c.epochs_pretrain = 0;
  TrainLog empty;
  const ModelParams init = pretrain(c, corpus.labeled, &empty);
  CHECK(empty.empty());
  CHECK(init == init_params(c.arch, mix_seed(c.seed, {detail::kTagInit})));
  CHECK_THROWS_AS(pretrain(c, {}), std::invalid_argument);
}

TEST_CASE("train log header and rows") {
  TrainLog log(2);
  log[1].epoch = 1;
  log[1].step = 7;
  std::ostringstream os;
  write_train_log(os, log);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == kTrainLogHeader);
  std::size_t rows = 0, commas_header = std::count(line.begin(), line.end(), ',');
  while (std::getline(is, line)) {
    ++rows;
    CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) == commas_header);
  }
  CHECK(rows == 2);
  CHECK(os.str().find("\n1,7,") != std::string::npos);
}

TEST_CASE("semi step: EMA teacher, alignment and collision invariants") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig c = tiny_config();
  c.verify_alignment = true;
  c.collision_objectness = 0.0;  // every teacher detection blocks insertion
  const ModelParams pre = pretrain(c, corpus.labeled);
  SemiState st = make_semi_state(c, pre, corpus.labeled);
  CHECK(st.student == pre);
  CHECK(st.teacher == pre);

  std::size_t inserted = 0;
  for (int step = 0; step < 4; ++step) {
    const ModelParams student_before = st.student;
    const ModelParams teacher_before = st.teacher;
    const StepRecord r = semi_step(st, {corpus.labeled[static_cast<std::size_t>(step) % 4]},
                                   {corpus.unlabeled[static_cast<std::size_t>(step) % 6],
                                    corpus.unlabeled[static_cast<std::size_t>(step + 3) % 6]},
                                   0, c);
    CHECK(r.step == static_cast<std::uint64_t>(step));
    CHECK(r.n_misaligned == 0);
    CHECK(r.n_replay_mismatch == 0);
    CHECK(r.n_collision_violations == 0);
    CHECK(std::isfinite(r.loss.total));
    inserted += r.n_inserted;
    CHECK_FALSE(st.student == student_before);
    // teacher' = alpha * teacher + (1 - alpha) * student'
    for (std::size_t i = 0; i < st.teacher.scalar_count(); ++i) {
      const double expect = c.ema_alpha * teacher_before.scalar(i) + (1.0 - c.ema_alpha) * st.student.scalar(i);
      REQUIRE(std::abs(st.teacher.scalar(i) - expect) <= 1e-12 * (1.0 + std::abs(expect)));
    }
  }
  CHECK(inserted > 0);

  // Past the pasting window nothing is inserted.
  for (int step = 0; step < 2; ++step) {
    const StepRecord r = semi_step(st, {corpus.labeled[0]}, {corpus.unlabeled[0]}, c.aug_epochs, c);
    CHECK(r.n_inserted == 0);
  }
}

TEST_CASE("feature matching is inactive when every scene is labeled") {
  const Corpus corpus = tiny_corpus(6, 6);
  TrainerConfig c = tiny_config();
  c.epochs_pretrain = 1;
  c.epochs_semi = 1;
  c.aug_epochs = 1;
  const ModelParams pre = pretrain(c, corpus.labeled);
  const TrainResult r = train_semi(c, corpus.labeled, {}, pre);
  REQUIRE(r.log.size() == 3);
  for (const auto& rec : r.log) {
    CHECK(rec.loss.feature_matching == 0.0);
    CHECK(rec.loss_pseudo == 0.0);
    CHECK(rec.n_pseudo == 0);
    CHECK(rec.n_gated == 0);
  }
}

TEST_CASE("semi-supervised training is reproducible") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig c = tiny_config();
  const auto dir = std::filesystem::temp_directory_path() / "dpke_test_trainer";
  std::filesystem::remove_all(dir);
  const ModelParams pre = pretrain(c, corpus.labeled);

  std::vector<std::string> logs, students, teachers, periodic;
  for (int run = 0; run < 2; ++run) {
    TrainerConfig rc = c;
    rc.checkpoint_every = 1;
    rc.checkpoint_dir = (dir / std::to_string(run)).string();
    std::filesystem::create_directories(rc.checkpoint_dir);
    const TrainResult r = train_semi(rc, corpus.labeled, corpus.unlabeled, pre);
    logs.push_back(log_text(r.log));
    students.push_back(ckpt_bytes(r.student));
    teachers.push_back(ckpt_bytes(r.teacher));
    std::ifstream is(std::filesystem::path(rc.checkpoint_dir) / "teacher_e003.ckpt", std::ios::binary);
    REQUIRE(is);
    periodic.push_back(std::string(std::istreambuf_iterator<char>(is), {}));
    CHECK(r.log.size() == 6);  // 3 epochs x 2 labeled batches
    for (const auto& rec : r.log) {
      CHECK(rec.n_misaligned == 0);
      CHECK(rec.n_collision_violations == 0);
      if (rec.epoch >= c.aug_epochs) CHECK(rec.n_inserted == 0);
      CHECK(rec.frac_strong + rec.frac_weak + rec.frac_invalid <= 1.0 + 1e-12);
    }
  }
  CHECK(logs[0] == logs[1]);
  CHECK(students[0] == students[1]);
  CHECK(teachers[0] == teachers[1]);
  CHECK(periodic[0] == periodic[1]);
  CHECK(periodic[0] == teachers[0]);
  std::filesystem::remove_all(dir);

  TrainerConfig other = c;
  other.arch.num_proposals = 8;
  CHECK_THROWS_AS(train_semi(other, corpus.labeled, corpus.unlabeled, pre), std::invalid_argument);
  CHECK_THROWS_AS(train_semi(c, {}, corpus.unlabeled, pre), std::invalid_argument);
}
