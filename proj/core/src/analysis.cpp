#include "merlin/analysis.hpp"

#include "merlin/error.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>
#include <map>

namespace merlin::analysis {

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "last_token"; }

Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "last_token") return Pooling::last_token;
  throw ConfigError("unknown pooling '" + s + "'");
}

std::string to_string(InputMode m) { return m == InputMode::assembled ? "assembled" : "text"; }

InputMode input_mode_from_string(const std::string& s) {
  if (s == "assembled") return InputMode::assembled;
  if (s == "text") return InputMode::text;
  throw ConfigError("unknown input mode '" + s + "'");
}

namespace {

Matrix decoder_input(const ModelView& m, const std::string& sentence, const std::string& language) {
  modelstack::StackHandle& stack = *m.stack;
  const TokenIds ids = stack.tokenizer.encode(sentence, language);
  if (ids.empty()) throw InvalidInput("sentence is empty after tokenization");
  if (m.mode == InputMode::text) return modelstack::embed_tokens(stack, ids).embeddings;
  if (m.connector == nullptr) throw InvalidInput("assembled input needs a connector");
  const connector::MappedPrefix prefix = connector::project(*m.connector, modelstack::encode(stack, sentence, language));
  return connector::assemble_augmented(stack, prefix, ids, m.connector).embeddings;
}

Eigen::RowVectorXd pool(const Matrix& h, Pooling p) {
  if (p == Pooling::last_token) return h.row(h.rows() - 1);
  return h.colwise().mean();
}

}  // namespace

std::vector<SentenceEmbeddingSet> layerwise_embeddings(const ModelView& model, const std::vector<std::string>& sentences,
                                                       const std::string& language, Pooling pooling) {
  if (model.stack == nullptr) throw InvalidInput("no stack");
  if (model.adapters != nullptr) model.adapters->set_enabled(true);
  const int layers = model.stack->n_layers() + 1;
  const Index n = static_cast<Index>(sentences.size());
  const Index d = model.stack->d_llm();
  std::vector<SentenceEmbeddingSet> out(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    auto& s = out[static_cast<std::size_t>(l)];
    s.embeddings.resize(n, d);
    s.layer = l;
    s.language = language;
    s.pooling = pooling;
  }
  for (Index i = 0; i < n; ++i) {
    const auto r = modelstack::decoder_forward(*model.stack, decoder_input(model, sentences[static_cast<std::size_t>(i)], language), true);
    for (int l = 0; l < layers; ++l)
      out[static_cast<std::size_t>(l)].embeddings.row(i) = pool(r.hidden_states[static_cast<std::size_t>(l)], pooling);
  }
  return out;
}

SentenceEmbeddingSet sentence_embeddings(const ModelView& model, const std::vector<std::string>& sentences,
                                         const std::string& language, int layer, Pooling pooling) {
  if (model.stack == nullptr) throw InvalidInput("no stack");
  if (layer < 0 || layer > model.stack->n_layers())
    throw InvalidLayer("layer " + std::to_string(layer) + " outside [0, " + std::to_string(model.stack->n_layers()) + "]");
  return std::move(layerwise_embeddings(model, sentences, language, pooling)[static_cast<std::size_t>(layer)]);
}

double retrieval_at_k(const Matrix& queries, const Matrix& candidates, const std::vector<int>& gold, int k) {
  if (queries.cols() != candidates.cols())
    throw ShapeError("retrieval: query width " + std::to_string(queries.cols()) + " vs candidate width " +
                     std::to_string(candidates.cols()));
  if (static_cast<Index>(gold.size()) != queries.rows()) throw InvalidInput("retrieval: one gold index per query");
  if (k < 1 || k > candidates.rows()) throw InvalidInput("retrieval: k outside [1, N_candidates]");
  if (queries.rows() == 0) throw InvalidInput("retrieval: no queries");
  auto normalized = [](const Matrix& m) {
    Matrix out = m;
    for (Index i = 0; i < m.rows(); ++i) {
      const double nrm = m.row(i).norm();
      if (nrm > 0.0) out.row(i) /= nrm;
    }
    return out;
  };
  const Matrix sim = normalized(queries) * normalized(candidates).transpose();
  int hits = 0;
  for (Index i = 0; i < sim.rows(); ++i) {
    const int g = gold[static_cast<std::size_t>(i)];
    if (g < 0 || g >= candidates.rows()) throw InvalidInput("retrieval: gold index out of range");
    const double sg = sim(i, g);
    int ahead = 0;
    for (Index j = 0; j < sim.cols(); ++j)
      if (sim(i, j) > sg || (sim(i, j) == sg && j < g)) ++ahead;
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(sim.rows());
}

double retrieval_at_k(const SentenceEmbeddingSet& queries, const SentenceEmbeddingSet& candidates,
                      const std::vector<int>& gold, int k) {
  return retrieval_at_k(queries.embeddings, candidates.embeddings, gold, k);
}

RetrievalCurve retrieval_curve(const ModelView& model, const std::string& name,
                               const std::vector<datapipe::ParallelPair>& pairs,
                               const std::vector<std::string>& languages, const CurveOptions& opts) {
  if (languages.empty()) throw InvalidInput("retrieval_curve: no languages");
  RetrievalCurve c;
  c.model = name;
  c.k = opts.k;
  c.languages = languages;
  c.scores.assign(static_cast<std::size_t>(model.stack->n_layers() + 1), 0.0);
  for (const auto& lang : languages) {
    std::vector<std::string> src, ref;
    for (const auto& p : pairs) {
      if (p.language != lang) continue;
      if (static_cast<int>(src.size()) >= opts.max_pairs) break;
      src.push_back(p.source);
      ref.push_back(p.reference);
    }
    if (src.empty()) throw InvalidInput("retrieval_curve: no pairs for language '" + lang + "'");
    if (c.n_pairs == 0) c.n_pairs = static_cast<int>(src.size());
    const auto e = layerwise_embeddings(model, ref, "en", opts.pooling);
    const auto t = layerwise_embeddings(model, src, lang, opts.pooling);
    std::vector<int> gold(src.size());
    for (std::size_t i = 0; i < gold.size(); ++i) gold[i] = static_cast<int>(i);
    for (std::size_t l = 0; l < c.scores.size(); ++l)
      c.scores[l] += opts.english_queries ? retrieval_at_k(e[l], t[l], gold, opts.k) : retrieval_at_k(t[l], e[l], gold, opts.k);
  }
  for (double& s : c.scores) s /= static_cast<double>(languages.size());
  return c;
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<RetrievalCurve>& curves) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << "model,layer,score\n";
  out.precision(10);
  for (const auto& c : curves)
    for (std::size_t l = 0; l < c.scores.size(); ++l) out << c.model << ',' << l << ',' << c.scores[l] << '\n';
}

std::vector<Point2D> export_embeddings_2d(const std::vector<SentenceEmbeddingSet>& sets) {
  Index n = 0;
  Index d = -1;
  for (const auto& s : sets) {
    if (s.embeddings.rows() == 0) continue;
    if (d >= 0 && s.embeddings.cols() != d) throw ShapeError("export_embeddings_2d: sets differ in width");
    d = s.embeddings.cols();
    n += s.embeddings.rows();
  }
  if (n < 2) throw InvalidInput("export_embeddings_2d: need at least 2 points");
  Matrix x(n, d);
  std::vector<Point2D> out;
  out.reserve(static_cast<std::size_t>(n));
  Index r = 0;
  for (const auto& s : sets)
    for (Index i = 0; i < s.embeddings.rows(); ++i, ++r) {
      x.row(r) = s.embeddings.row(i);
      const std::string id = static_cast<std::size_t>(i) < s.ids.size() ? s.ids[static_cast<std::size_t>(i)] : std::to_string(i);
      out.push_back({0.0, 0.0, s.language, id});
    }
  x.rowwise() -= x.colwise().mean();
  const Matrix cov = x.transpose() * x / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::MatrixXd& v = eig.eigenvectors();  // ascending eigenvalues
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, 2);
  for (Index c = 0; c < std::min<Index>(2, d); ++c) {
    Eigen::VectorXd dir = v.col(d - 1 - c);
    for (Index j = 0; j < d; ++j) {
      if (std::abs(dir(j)) > 1e-12) {
        if (dir(j) < 0) dir = -dir;
        break;
      }
    }
    basis.col(c) = dir;
  }
  const Eigen::MatrixXd proj = x * basis;
  for (Index i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)].x = proj(i, 0);
    out[static_cast<std::size_t>(i)].y = proj(i, 1);
  }
  return out;
}

void write_points_csv(const std::filesystem::path& path, const std::vector<Point2D>& points) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << "x,y,language,id\n";
  out.precision(10);
  for (const auto& p : points) out << p.x << ',' << p.y << ',' << p.language << ',' << p.id << '\n';
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<SentenceEmbeddingSet>& sets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  const Index d = sets.empty() ? 0 : sets.front().embeddings.cols();
  out << "language,id";
  for (Index j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  out.precision(10);
  for (const auto& s : sets)
    for (Index i = 0; i < s.embeddings.rows(); ++i) {
      out << s.language << ',' << (static_cast<std::size_t>(i) < s.ids.size() ? s.ids[static_cast<std::size_t>(i)] : std::to_string(i));
      for (Index j = 0; j < s.embeddings.cols(); ++j) out << ',' << s.embeddings(i, j);
      out << '\n';
    }
}

}  // namespace merlin::analysis
