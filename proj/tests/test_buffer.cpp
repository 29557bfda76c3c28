#include <cmath>
#include <filesystem>
#include <functional>

#include "doctest.h"
#include "mdist/buffer.hpp"

using namespace mdist;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInvalidArgument;  // sentinel: nothing thrown
}

struct Fixture {
  std::unique_ptr<Environment> env;
  TeacherNets teacher;
  MaskSpec masks;
};

Fixture fixture(const std::string& name) {
  EnvConfig cfg;
  cfg.name = name;
  auto env = make_env(cfg);
  Rng rng(1);
  TeacherNets t = make_teacher(*env, TeacherConfig{.hidden_dim = 8, .hidden_layers = 1}, rng);
  MaskSpec m;
  if (name == "spread")
    m.agents = {{{Block::kOwn, Block::kLandmark}, std::nullopt},
                {{Block::kLandmark}, std::nullopt},
                {{}, std::make_pair(8, 10)}};
  else
    m.agents = {{{Block::kEnemy}, std::nullopt},
                {{Block::kAlly, Block::kEnemy}, std::nullopt},
                {{Block::kOwn, Block::kEnemy}, std::nullopt}};
  return {std::move(env), std::move(t), std::move(m)};
}

BufferMetadata provenance(std::uint64_t seed) {
  BufferMetadata p;
  p.config_hash = 0x1234;
  p.env_config_hash = 0x5678;
  p.teacher_hash = 0x9abc;
  p.seed = seed;
  p.mask_table = "[]";
  return p;
}

}  // namespace

TEST_CASE("one spread episode yields 25 records ending in done") {
  Fixture f = fixture("spread");
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 1, provenance(3));
  REQUIRE(b.episodes.size() == 1);
  CHECK(b.episodes[0].size() == 25);
  CHECK(b.episodes[0].back().done);
  for (std::size_t t = 0; t + 1 < 25; ++t) CHECK_FALSE(b.episodes[0][t].done);
  CHECK(b.metadata.n_agents == 3);
  CHECK(b.metadata.obs_dim == 14);
  CHECK(b.metadata.embedding_dim == 8);
  CHECK(b.metadata.seed == 3);
}

TEST_CASE("record invariants hold on every record") {
  for (const char* name : {"spread", "skirmish"}) {
    Fixture f = fixture(name);
    const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 4, provenance(5));
    for (std::size_t e = 0; e < b.episodes.size(); ++e) {
      const auto& ep = b.episodes[e];
      check_segment(b, Segment{e, 0, ep.size()});
      for (std::size_t t = 0; t < ep.size(); ++t) {
        if (t + 1 < ep.size()) {
          CHECK(ep[t].next_value == ep[t + 1].value);
          CHECK(ep[t].next_state == ep[t + 1].state);
        }
        for (const AgentRecord& a : ep[t].agents) {
          if (!a.active) continue;
          const Vec lp = log_softmax_temp(a.teacher_logits, 1.0);
          CHECK(std::abs(lp[a.action] - a.behavior_logp) < 1e-9);
          for (Eigen::Index k = 0; k < a.obs_full.size(); ++k)
            CHECK((a.obs_masked[k] == 0.0 || a.obs_masked[k] == a.obs_full[k]));
        }
      }
    }
  }
}

TEST_CASE("stored values are in environment units") {
  Fixture f = fixture("spread");
  f.teacher.value_scale = 20.0;
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 1, provenance(3));
  const ExpertRecord& r = b.episodes[0][0];
  CHECK(r.value == doctest::Approx(20.0 * critic_forward(f.teacher.critic, f.teacher.critic_params, r.state)));
}

TEST_CASE("skirmish masks zero the hidden blocks") {
  Fixture f = fixture("skirmish");
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 2, provenance(1));
  for (const auto& ep : b.episodes)
    for (const auto& r : ep) {
      CHECK(r.agents[0].obs_masked.head(9).isZero());
      CHECK(r.agents[1].obs_masked.head(3).isZero());
    }
}

TEST_CASE("recording is seeded") {
  Fixture f = fixture("skirmish");
  CHECK(record_expert(*f.env, f.teacher, f.masks, 3, provenance(7)) ==
        record_expert(*f.env, f.teacher, f.masks, 3, provenance(7)));
  CHECK_FALSE(record_expert(*f.env, f.teacher, f.masks, 3, provenance(7)) ==
              record_expert(*f.env, f.teacher, f.masks, 3, provenance(8)));
}

TEST_CASE("buffer file round trip is bit-exact") {
  Fixture f = fixture("spread");
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 2, provenance(2));
  const auto path = (std::filesystem::temp_directory_path() / "mdist_test_buffer.bin").string();
  save_buffer(b, path);
  const ExpertBuffer back = load_buffer(path);
  CHECK(back == b);
  CHECK(encode_buffer(back) == encode_buffer(b));
  CHECK(back.content_hash() == b.content_hash());
  std::filesystem::remove(path);
}

TEST_CASE("damaged buffers raise distinct typed errors") {
  Fixture f = fixture("spread");
  const std::string bytes = encode_buffer(record_expert(*f.env, f.teacher, f.masks, 2, provenance(2)));

  CHECK(code_of([&] { decode_buffer(bytes.substr(0, bytes.size() - 100)); }) == ErrorCode::kCorrupt);
  CHECK(code_of([&] { decode_buffer(bytes.substr(0, 10)); }) == ErrorCode::kCorrupt);
  CHECK(code_of([&] { decode_buffer(""); }) == ErrorCode::kCorrupt);
  try {
    decode_buffer(bytes.substr(0, bytes.size() / 2));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("corrupt buffer") != std::string::npos);
  }

  std::string version = bytes;
  version[8] = 2;
  CHECK(code_of([&] { decode_buffer(version); }) == ErrorCode::kVersionMismatch);

  // Metadata edit: the seed field sits 24 bytes into the metadata block.
  std::string meta = bytes;
  meta[12 + 24] ^= 0x01;
  CHECK(code_of([&] { decode_buffer(meta); }) == ErrorCode::kHashMismatch);

  std::string body = bytes;
  body[bytes.size() / 2] ^= 0x10;
  CHECK(code_of([&] { decode_buffer(body); }) == ErrorCode::kCorrupt);

  Rng rng(4);
  for (int k = 0; k < 200; ++k) {
    std::string b = bytes;
    b[uniform_int(rng, 0, static_cast<int>(b.size()) - 1)] ^= static_cast<char>(uniform_int(rng, 1, 255));
    if (uniform01(rng) < 0.3) b.resize(uniform_int(rng, 0, static_cast<int>(b.size())));
    CHECK_THROWS_AS(decode_buffer(b), Error);
  }
}

TEST_CASE("minibatch sampling") {
  Fixture f = fixture("skirmish");
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 6, provenance(4));
  const int L = static_cast<int>(b.shortest_episode());
  Rng r1(3), r2(3);
  const auto s1 = sample_minibatch(b, 32, L, r1), s2 = sample_minibatch(b, 32, L, r2);
  REQUIRE(s1.size() == 32);
  for (std::size_t k = 0; k < s1.size(); ++k) {
    CHECK(s1[k].episode == s2[k].episode);
    CHECK(s1[k].start == s2[k].start);
    CHECK(s1[k].start + s1[k].length <= b.episodes[s1[k].episode].size());
    // A done flag may only appear on the final record of a segment.
    for (std::size_t t = 0; t + 1 < s1[k].length; ++t) CHECK_FALSE(b.episodes[s1[k].episode][s1[k].start + t].done);
    check_segment(b, s1[k]);
  }
  CHECK(code_of([&] { sample_minibatch(b, 0, 4, r1); }) == ErrorCode::kInvalidArgument);
  std::size_t longest = 0;
  for (const auto& ep : b.episodes) longest = std::max(longest, ep.size());
  CHECK(code_of([&] { sample_minibatch(b, 4, static_cast<int>(longest) + 1, r1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("segments longer than some episodes draw only from long enough ones") {
  Fixture f = fixture("spread");
  ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 4, provenance(5));
  b.episodes[1].resize(6);
  b.episodes[1].back().done = true;
  b.episodes[3].resize(3);
  b.episodes[3].back().done = true;
  Rng rng(4);
  std::vector<int> counts(4, 0);
  for (const Segment& s : sample_minibatch(b, 3000, 8, rng)) ++counts[s.episode];
  CHECK(counts[1] == 0);
  CHECK(counts[3] == 0);
  CHECK(counts[0] > 1300);
  CHECK(counts[2] > 1300);
  for (const Segment& s : sample_minibatch(b, 500, 5, rng)) CHECK(s.episode != 3);
}

TEST_CASE("episode selection is uniform") {
  Fixture f = fixture("spread");
  const ExpertBuffer b = record_expert(*f.env, f.teacher, f.masks, 5, provenance(6));
  Rng rng(8);
  std::vector<double> counts(5, 0.0);
  const int draws = 10000;
  for (const Segment& s : sample_minibatch(b, draws, 16, rng)) counts[s.episode] += 1.0;
  const double p = 0.2, sigma = std::sqrt(draws * p * (1 - p));
  for (double c : counts) CHECK(std::abs(c - draws * p) < 3.0 * sigma);
}
