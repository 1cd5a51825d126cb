#include "merlin/adapters.hpp"
#include "merlin/analysis.hpp"
#include "merlin/connector.hpp"
#include "merlin/curriculum.hpp"
#include "merlin/evalharness.hpp"

#include "tiny_stack.hpp"

#include <benchmark/benchmark.h>

using namespace merlin;

namespace {

connector::Connector make_connector(int d_enc, int d_llm, int hidden) {
  connector::ConnectorSpec s;
  s.variant = connector::Variant::mlp2;
  s.d_enc = d_enc;
  s.d_llm = d_llm;
  s.hidden = hidden;
  return connector::Connector(s, 1);
}

void BM_ConnectorProject(benchmark::State& state) {
  const int len = static_cast<int>(state.range(0));
  connector::Connector c = make_connector(16, 32, 64);
  std::mt19937_64 rng(1);
  const Matrix x = gaussian(len, 16, 1.0, rng);
  for (auto _ : state) {
    ag::Tape tape;
    tape.set_grad_enabled(false);
    benchmark::DoNotOptimize(c.forward(tape, tape.constant(x)).value().data());
  }
  state.SetItemsProcessed(state.iterations() * len);
}
BENCHMARK(BM_ConnectorProject)->Arg(8)->Arg(32)->Arg(128);

void BM_DecoderForward(benchmark::State& state) {
  modelstack::StackHandle s = testing::tiny_stack(16, 32, 4);
  std::mt19937_64 rng(2);
  const Matrix x = gaussian(state.range(0), s.d_llm(), 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(modelstack::decoder_forward(s, x, false).logits.data());
}
BENCHMARK(BM_DecoderForward)->Arg(16)->Arg(64);

void BM_DecoderForwardDoRA(benchmark::State& state) {
  modelstack::StackHandle s = testing::tiny_stack(16, 32, 4);
  adapters::AdapterSpec spec;
  spec.rank = 2;
  spec.alpha = 4.0;
  adapters::AdapterSet set = adapters::attach(s, spec, 1);
  std::mt19937_64 rng(2);
  const Matrix x = gaussian(state.range(0), s.d_llm(), 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(modelstack::decoder_forward(s, x, false).logits.data());
}
BENCHMARK(BM_DecoderForwardDoRA)->Arg(16)->Arg(64);

void BM_MappingTrainStep(benchmark::State& state) {
  modelstack::StackHandle s = testing::tiny_stack(16, 32, 4);
  connector::Connector c = make_connector(16, 32, 64);
  std::mt19937_64 rng(3);
  const Matrix states = gaussian(8, 16, 1.0, rng);
  const std::vector<int> target{10, 11, 12, 13, 14};
  for (auto _ : state) {
    ag::Tape tape;
    const ag::Var prefix = c.forward(tape, tape.constant(states));
    const auto a = connector::assemble(tape, s, &c, prefix, connector::Layout::prefix_only, {});
    const ag::Var l = curriculum::nll(tape, s, a.embeddings, target);
    tape.backward(l);
    benchmark::DoNotOptimize(l.value().data());
  }
}
BENCHMARK(BM_MappingTrainStep);

void BM_RetrievalAtK(benchmark::State& state) {
  const Index n = state.range(0);
  std::mt19937_64 rng(4);
  const Matrix q = gaussian(n, 32, 1.0, rng), c = gaussian(n, 32, 1.0, rng);
  std::vector<int> gold(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) gold[static_cast<std::size_t>(i)] = static_cast<int>(i);
  for (auto _ : state) benchmark::DoNotOptimize(analysis::retrieval_at_k(q, c, gold, 5));
}
BENCHMARK(BM_RetrievalAtK)->Arg(200)->Arg(1000);

void BM_ExtractMathAnswer(benchmark::State& state) {
  const std::string text =
      "tom has 12 apples . tom gets 7 more . 12 plus 7 is 19 . so the total is 1,019.50 , The answer is 19 .";
  for (auto _ : state) benchmark::DoNotOptimize(evalharness::extract_math_answer(text));
}
BENCHMARK(BM_ExtractMathAnswer);

}  // namespace

BENCHMARK_MAIN();
