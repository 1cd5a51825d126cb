#pragma once

#include "merlin/adapters.hpp"
#include "merlin/connector.hpp"
#include "merlin/datapipe.hpp"
#include "merlin/modelstack/stack.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace merlin::analysis {

enum class Pooling { mean, last_token };
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

/// How a sentence reaches the decoder.
/// assembled: [bos; X_f; sep; T(s)] through the connector (inference path).
/// text: the decoder reads T(s) alone, as the base model would.
enum class InputMode { assembled, text };
std::string to_string(InputMode m);
InputMode input_mode_from_string(const std::string& s);

struct ModelView {
  modelstack::StackHandle* stack = nullptr;
  connector::Connector* connector = nullptr;
  adapters::AdapterSet* adapters = nullptr;
  InputMode mode = InputMode::assembled;
};

struct SentenceEmbeddingSet {
  Matrix embeddings;  // (N, d_llm)
  int layer = 0;
  std::string language;
  Pooling pooling = Pooling::mean;
  std::vector<std::string> ids;
};

/// Pooled hidden_states[layer]; layer 0 is the decoder input.
SentenceEmbeddingSet sentence_embeddings(const ModelView& model, const std::vector<std::string>& sentences,
                                         const std::string& language, int layer, Pooling pooling = Pooling::mean);
/// Every layer (0..n_layers) from one forward pass per sentence.
std::vector<SentenceEmbeddingSet> layerwise_embeddings(const ModelView& model, const std::vector<std::string>& sentences,
                                                       const std::string& language, Pooling pooling = Pooling::mean);

/// Fraction of queries whose gold candidate is among the k nearest by cosine
/// similarity (ties go to the lower candidate index). gold[i] is the
/// candidate index for query i.
double retrieval_at_k(const Matrix& queries, const Matrix& candidates, const std::vector<int>& gold, int k);
double retrieval_at_k(const SentenceEmbeddingSet& queries, const SentenceEmbeddingSet& candidates,
                      const std::vector<int>& gold, int k);

struct RetrievalCurve {
  std::string model;
  int k = 5;
  std::vector<std::string> languages;
  int n_pairs = 0;                // per language
  std::vector<double> scores;    // index = layer, n_layers + 1 entries
};

struct CurveOptions {
  int k = 5;
  int max_pairs = 200;
  Pooling pooling = Pooling::mean;
  /// English references query the target-language sources; false reverses.
  bool english_queries = true;
};

/// Per-layer retrieval@k over the pairs of each language, averaged across
/// languages.
RetrievalCurve retrieval_curve(const ModelView& model, const std::string& name,
                               const std::vector<datapipe::ParallelPair>& pairs,
                               const std::vector<std::string>& languages, const CurveOptions& opts = {});

/// Columns: model, layer, score.
void write_curves_csv(const std::filesystem::path& path, const std::vector<RetrievalCurve>& curves);

struct Point2D {
  double x = 0.0;
  double y = 0.0;
  std::string language;
  std::string id;
};

/// Centers all rows and projects them on the top two principal directions;
/// each direction's first nonzero component is made positive.
std::vector<Point2D> export_embeddings_2d(const std::vector<SentenceEmbeddingSet>& sets);

/// Columns: x, y, language, id.
void write_points_csv(const std::filesystem::path& path, const std::vector<Point2D>& points);
/// Columns: language, id, e0..e{d-1}.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<SentenceEmbeddingSet>& sets);

}  // namespace merlin::analysis
