#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "qkt/checkpoint.hpp"

using namespace qkt;

TEST_CASE("checkpoint round trip is bit exact") {
  const ModelParams m = qkt::testing::small_mlp(5, 4, 3);
  const auto bytes = save_checkpoint(m);
  CHECK(bytes.size() == 16 + 8 * m.num_layers() + 8 * m.parameter_count());
  const ModelParams back = load_checkpoint(bytes);
  CHECK(bitwise_equal(back, m));
  CHECK(save_checkpoint(back) == bytes);
  const Matrix x = qkt::testing::random_batch(6, 5, 4, 1).inputs;
  CHECK(forward(back, x).probs == forward(m, x).probs);
}

TEST_CASE("checkpoint header layout") {
  const ModelParams m = qkt::testing::small_mlp(3, 2, 1);
  const auto b = save_checkpoint(m);
  CHECK(b[0] == 'Q');
  CHECK(b[1] == 'K');
  CHECK(b[2] == 'T');
  CHECK(b[3] == 'M');
  CHECK(b[4] == 1);  // version, little-endian
  CHECK(b[8] == 3);  // layer count
  CHECK(b[12] == 2);  // split index
  CHECK(b[16] == 8);  // first layer out_dim
  CHECK(b[20] == 3);  // first layer in_dim
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto good = save_checkpoint(qkt::testing::small_mlp(3, 2, 1));

  auto truncated = good;
  truncated.resize(good.size() - 1);
  CHECK_THROWS_AS(load_checkpoint(truncated), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(std::span(good.data(), 10)), CheckpointError);

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(load_checkpoint(trailing), CheckpointError);

  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(magic), CheckpointError);

  auto version = good;
  version[4] = 2;
  CHECK_THROWS_AS(load_checkpoint(version), CheckpointError);

  auto split = good;
  split[12] = 7;
  CHECK_THROWS_AS(load_checkpoint(split), CheckpointError);

  auto huge = good;
  huge[19] = 0x7f;  // first out_dim becomes enormous
  CHECK_THROWS_AS(load_checkpoint(huge), CheckpointError);

  auto shapes = good;
  shapes[20] = 4;  // first in_dim no longer matches the payload
  CHECK_THROWS_AS(load_checkpoint(shapes), CheckpointError);
}

TEST_CASE("checkpoint files and digests") {
  const auto dir = std::filesystem::temp_directory_path() / "qkt_ckpt_test";
  std::filesystem::create_directories(dir);
  const ModelParams m = qkt::testing::small_mlp(4, 3, 8);
  write_checkpoint_file(dir / "m.qktm", m);
  CHECK(bitwise_equal(read_checkpoint_file(dir / "m.qktm"), m));
  CHECK_THROWS_AS(read_checkpoint_file(dir / "missing.qktm"), CheckpointError);
  CHECK(checkpoint_digest(m).size() == 16);
  CHECK(checkpoint_digest(m) == checkpoint_digest(read_checkpoint_file(dir / "m.qktm")));
  CHECK(checkpoint_digest(m) != checkpoint_digest(qkt::testing::small_mlp(4, 3, 9)));
  std::filesystem::remove_all(dir);
}

TEST_CASE("fnv1a reference values") {
  const std::vector<std::uint8_t> empty;
  CHECK(fnv1a_hex(empty) == "cbf29ce484222325");
  const std::vector<std::uint8_t> a{'a'};
  CHECK(fnv1a_hex(a) == "af63dc4c8601ec8c");
}
