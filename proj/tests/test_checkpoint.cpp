#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "regdiff/pipeline.hpp"

using namespace regdiff;
namespace fs = std::filesystem;

namespace {

ParameterSet sample_params() {
  Rng rng(3);
  ParameterSet ps;
  ps.add("a", standard_normal({3, 4}, rng));
  ps.add("b.bias", standard_normal({5}, rng));
  ps.add("c", standard_normal({2, 1, 3}, rng));
  return ps;
}

CheckpointError::Kind kind_of(std::span<const unsigned char> bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("expected a checkpoint error");
  return CheckpointError::Kind::kIo;
}

}  // namespace

TEST_CASE("checkpoint round trip at single precision") {
  const ParameterSet ps = sample_params();
  const auto bytes = encode_checkpoint(ps);
  const ParameterSet back = decode_checkpoint(bytes);
  CHECK(back == round_to_f32(ps));
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps.value(i).size(); ++j)
      CHECK(std::abs(back.value(i)[j] - ps.value(i)[j]) <= 1e-7 * std::abs(ps.value(i)[j]) + 1e-30);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(std::memcmp(bytes.data(), "RGDF", 4) == 0);
}

TEST_CASE("corrupt checkpoints give distinct errors") {
  const auto good = encode_checkpoint(sample_params());
  auto flipped = good;
  flipped[40] ^= 0x10;
  CHECK(kind_of(flipped) == CheckpointError::Kind::kCrc);

  auto magic = good;
  magic[0] = 'X';
  CHECK(kind_of(magic) == CheckpointError::Kind::kFormat);

  auto version = good;
  version[4] = 9;
  CHECK(kind_of(version) == CheckpointError::Kind::kVersion);

  const std::vector<unsigned char> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2));
  CHECK(kind_of(cut) == CheckpointError::Kind::kTruncated);
  const std::vector<unsigned char> tiny(good.begin(), good.begin() + 6);
  CHECK(kind_of(tiny) == CheckpointError::Kind::kTruncated);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/regdiff.ckpt"), CheckpointError);
}

TEST_CASE("models travel with their configs") {
  const fs::path dir = fs::temp_directory_path() / "regdiff_ckpt";
  fs::create_directories(dir);
  VaeConfig vc;
  vc.latent_dim = 8;
  vc.model_dim = 16;
  VaeModel vae = VaeModel::init(vc, 4);
  save_vae(vae, dir / "vae.ckpt");
  const VaeModel vb = load_vae(dir / "vae.ckpt");
  CHECK(vb.config() == vc);
  CHECK(vb.frozen());
  CHECK(vb.params() == round_to_f32(vae.params()));

  DenoiserConfig dc;
  dc.hidden = 32;
  dc.layers = 1;
  const DenoiserModel den = DenoiserModel::init(dc, 5);
  save_denoiser(den, dir / "den.ckpt");
  const DenoiserModel db = load_denoiser(dir / "den.ckpt");
  CHECK(db.config() == dc);
  CHECK(db.params() == round_to_f32(den.params()));
  CHECK_THROWS_AS(load_vae(dir / "den.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("run config survives its own text form") {
  RunConfig c;
  c.pairing = PairMode::kNonParallel;
  c.lambdas = {0, 0.5, 3};
  c.seeds = {4, 5};
  c.gamma = 1.25;
  c.guidance = GuidanceMode::kCg;
  c.diff_lr = 3e-4;
  c.vae_beta = 0.0;
  const fs::path p = fs::temp_directory_path() / "regdiff_config.txt";
  c.save(p);
  CHECK(RunConfig::load(p) == c);
  fs::remove(p);

  RunConfig d;
  CHECK_THROWS_AS(d.set("nonsense", "1"), std::invalid_argument);
  CHECK_THROWS_AS(d.set("gamma", "abc"), std::invalid_argument);
  d.lambdas = {1, 1};
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
  parse_dims("4,8,12", d);
  CHECK(d.latent_dim == 4);
  CHECK(d.vae_dim == 8);
  CHECK(d.denoiser_dim == 12);
  CHECK(format_lambda(3) == "3");
  CHECK(format_lambda(0.5) == "0.5");
}
