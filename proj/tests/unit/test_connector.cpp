#include "merlin/connector.hpp"
#include "merlin/error.hpp"

#include "tiny_stack.hpp"

#include <doctest.h>

#include <filesystem>

using namespace merlin;
using namespace merlin::connector;

namespace {

ConnectorSpec spec_of(Variant v, int e, int l, int h, bool bias) {
  ConnectorSpec s;
  s.variant = v;
  s.d_enc = e;
  s.d_llm = l;
  s.hidden = h;
  s.bias = bias;
  return s;
}

std::int64_t brute_count(Connector& c) {
  std::int64_t n = 0;
  for (Parameter* p : c.parameters()) n += p->numel();
  return n;
}

}  // namespace

TEST_CASE("bias-free parameter counts at the published dimensions") {
  CHECK(param_count(spec_of(Variant::linear, 1024, 3584, 2048, false)) == 1024LL * 3584);
  CHECK(param_count(spec_of(Variant::linear, 1024, 3584, 2048, false)) == 3670016);
  CHECK(param_count(spec_of(Variant::mlp1, 1024, 3584, 2048, false)) == 3670016);
  CHECK(param_count(spec_of(Variant::mlp2, 1024, 3584, 2048, false)) == 9437184);
  CHECK(param_count(spec_of(Variant::mlp3, 1024, 3584, 2048, false)) == 13631488);
  ConnectorSpec pad = spec_of(Variant::residual_mlp, 1024, 3584, 2048, false);
  pad.skip = SkipMode::pad;
  CHECK(param_count(pad) == 9437184);
  CHECK(param_count(spec_of(Variant::residual_mlp, 1024, 3584, 2048, false)) == 9437184 + 3670016);
}

TEST_CASE("display rounding to 0.01 M") {
  CHECK(display_millions(3670016) == "3.67 M");
  CHECK(display_millions(3677184) == "3.68 M");
  CHECK(display_millions(9446400) == "9.45 M");
  CHECK(display_millions(13642752) == "13.64 M");
}

TEST_CASE("param_count equals the registered tensor sizes for every variant") {
  for (Variant v : {Variant::linear, Variant::mlp1, Variant::mlp2, Variant::mlp3, Variant::residual_mlp})
    for (bool bias : {false, true})
      for (SkipMode skip : {SkipMode::linear, SkipMode::pad})
        for (bool sep : {false, true}) {
          ConnectorSpec s = spec_of(v, 5, 7, 6, bias);
          s.skip = skip;
          s.learned_sep = sep;
          Connector c(s, 1);
          CHECK(param_count(s) == brute_count(c));
        }
}

TEST_CASE("projection shapes and zero weights") {
  Connector c(spec_of(Variant::mlp2, 16, 32, 8, true), 3);
  std::mt19937_64 rng(1);
  const MappedPrefix m = project(c, modelstack::EncoderStates{gaussian(3, 16, 1.0, rng)});
  CHECK(m.rows.rows() == 3);
  CHECK(m.rows.cols() == 32);
  Connector z(spec_of(Variant::linear, 4, 6, 1, true), 3);
  for (Parameter* p : z.parameters()) p->value.setZero();
  CHECK(project(z, modelstack::EncoderStates{gaussian(2, 4, 1.0, rng)}).rows.isZero(0.0));
  CHECK_THROWS_AS(project(c, modelstack::EncoderStates{gaussian(3, 15, 1.0, rng)}), ShapeError);
}

TEST_CASE("projection is row-wise") {
  Connector c(spec_of(Variant::mlp3, 6, 5, 7, true), 3);
  std::mt19937_64 rng(2);
  const Matrix x = gaussian(4, 6, 1.0, rng);
  const Matrix all = project(c, modelstack::EncoderStates{x}).rows;
  for (Index i = 0; i < 4; ++i)
    CHECK((project(c, modelstack::EncoderStates{x.row(i)}).rows - all.row(i)).norm() < 1e-12);
}

TEST_CASE("residual output is the sum of the two paths") {
  std::mt19937_64 rng(4);
  const Matrix x = gaussian(1, 6, 1.0, rng);
  for (SkipMode mode : {SkipMode::linear, SkipMode::pad}) {
    ConnectorSpec s = spec_of(Variant::residual_mlp, 6, 4, 5, true);
    s.skip = mode;
    Connector c(s, 9);
    const ParamRefs p = c.parameters();
    // Independent evaluation of base path and skip path.
    auto gelu = [](double v) { return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v))); };
    Matrix h = x * p[0]->value.transpose() + p[1]->value;
    h = h.unaryExpr(gelu);
    const Matrix base = h * p[2]->value.transpose() + p[3]->value;
    Matrix skip(1, 4);
    if (mode == SkipMode::linear) {
      skip = x * p[4]->value.transpose() + p[5]->value;
    } else {
      skip = x.leftCols(4);
    }
    const Matrix got = project(c, modelstack::EncoderStates{x}).rows;
    CHECK((got - (base + skip)).norm() < 1e-12);
  }
}

TEST_CASE("assembly layouts and boundaries") {
  modelstack::StackHandle s = merlin::testing::tiny_stack();
  std::mt19937_64 rng(5);
  const MappedPrefix m{gaussian(3, s.d_llm(), 1.0, rng)};
  const AssembledInput a = assemble_prefix(s, m);
  CHECK(a.embeddings.rows() == 5);
  CHECK(a.boundaries.bos == 0);
  CHECK(a.boundaries.prefix_begin == 1);
  CHECK(a.boundaries.prefix_len == 3);
  CHECK(a.boundaries.sep == 4);
  const auto bos = modelstack::embed_tokens(s, std::vector<int>{s.bos_id}).embeddings;
  const auto sep = modelstack::embed_tokens(s, std::vector<int>{s.sep_id}).embeddings;
  CHECK(a.embeddings.row(0) == bos.row(0));
  CHECK(a.embeddings.row(4) == sep.row(0));
  CHECK(a.embeddings.middleRows(1, 3) == m.rows);

  const std::vector<int> q{10, 11, 12, 13};
  const AssembledInput b = assemble_augmented(s, m, q);
  CHECK(b.embeddings.rows() == 9);
  CHECK(b.layout == Layout::augmented);
  CHECK(b.boundaries.query_begin == 5);
  CHECK(b.embeddings.bottomRows(4) == modelstack::embed_tokens(s, q).embeddings);
  CHECK_THROWS_AS(assemble_augmented(s, m, std::vector<int>{}), InvalidInput);
  CHECK_THROWS_AS(assemble_prefix(s, MappedPrefix{Matrix::Zero(0, s.d_llm())}), InvalidInput);
}

TEST_CASE("project-then-assemble lengths for every prefix length") {
  modelstack::StackHandle s = merlin::testing::tiny_stack();
  Connector c(spec_of(Variant::mlp2, s.d_enc(), s.d_llm(), 8, true), 3);
  std::mt19937_64 rng(6);
  for (int l = 1; l <= 6; ++l) {
    const MappedPrefix m = project(c, modelstack::EncoderStates{gaussian(l, s.d_enc(), 1.0, rng)});
    CHECK(assemble_prefix(s, m).embeddings.rows() == 1 + l + 1);
    for (int q = 1; q <= 3; ++q)
      CHECK(assemble_augmented(s, m, std::vector<int>(q, 10)).embeddings.rows() == 1 + l + 1 + q);
  }
}

TEST_CASE("learned boundary replaces the reserved separator row") {
  modelstack::StackHandle s = merlin::testing::tiny_stack();
  ConnectorSpec spec = spec_of(Variant::linear, s.d_enc(), s.d_llm(), 1, true);
  spec.learned_sep = true;
  Connector c(spec, 2);
  c.sep_vector()->value.setConstant(0.5);
  const AssembledInput a = assemble_prefix(s, MappedPrefix{Matrix::Zero(2, s.d_llm())}, &c);
  CHECK(a.embeddings.row(3) == Matrix::Constant(1, s.d_llm(), 0.5));
}

TEST_CASE("connector gradients match finite differences through the frozen decoder") {
  modelstack::StackHandle s = merlin::testing::tiny_stack(6, 8, 2);
  std::mt19937_64 rng(8);
  const Matrix states = gaussian(3, s.d_enc(), 1.0, rng);
  const std::vector<int> query{10, 11};
  for (Variant v : {Variant::linear, Variant::mlp1, Variant::mlp2, Variant::mlp3, Variant::residual_mlp}) {
    ConnectorSpec spec = spec_of(v, s.d_enc(), s.d_llm(), 5, true);
    spec.learned_sep = true;
    Connector c(spec, 11);
    c.init_sep(modelstack::embed_tokens(s, std::vector<int>{s.sep_id}).embeddings);
    auto loss = [&](bool backward) {
      ag::Tape tape;
      const ag::Var prefix = c.forward(tape, tape.constant(states));
      const AssembledVar a = assemble(tape, s, &c, prefix, Layout::augmented, query);
      const ag::Var logits = s.decoder->forward(tape, a.embeddings, false, {}).logits;
      std::vector<int> targets(static_cast<std::size_t>(logits.rows()), -1);
      targets.back() = 12;
      targets[targets.size() - 2] = 13;
      const ag::Var l = ag::cross_entropy(logits, targets);
      if (backward) tape.backward(l);
      return l.value()(0, 0);
    };
    for (Parameter* p : c.parameters()) {
      INFO(to_string(v) << " " << p->name);
      CHECK(merlin::testing::fd_relative_error(*p, loss) < 1e-4);
    }
    for (Parameter* p : s.decoder_parameters()) CHECK(p->grad.size() == 0);
  }
}

TEST_CASE("connector checkpoints round-trip") {
  ConnectorSpec spec = spec_of(Variant::residual_mlp, 4, 6, 5, true);
  spec.skip = SkipMode::pad;
  Connector c(spec, 5);
  const auto dir = std::filesystem::temp_directory_path() / "merlin_conn_rt";
  std::filesystem::remove_all(dir);
  c.save(dir);
  Connector back = Connector::load(dir);
  CHECK(back.digest() == c.digest());
  CHECK(back.spec().skip == SkipMode::pad);
  CHECK_THROWS_AS(Connector::load(dir / "nope"), MissingArtifact);
  std::filesystem::remove_all(dir);
}
