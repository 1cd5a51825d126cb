#include "merlin/tensor.hpp"

#include "merlin/error.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

namespace merlin {

Matrix gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

namespace {

struct Sha256 {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};

  Sha256() { EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr); }

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx.get(), data, n); }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), out.data(), &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(out[i]);
    return os.str();
  }
};

}  // namespace

std::string digest(std::span<Parameter* const> params) {
  Sha256 h;
  for (const Parameter* p : params) {
    h.update(p->name.data(), p->name.size());
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    h.update(shape, sizeof(shape));
    h.update(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return h.hex();
}

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

void save_blob(const std::filesystem::path& path, std::span<Parameter* const> params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const Parameter* p : params) {
    const auto len = static_cast<std::uint32_t>(p->name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(p->name.data(), len);
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    out.write(reinterpret_cast<const char*>(shape), sizeof(shape));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
}

void load_blob(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::map<std::string, Matrix> blobs;
  while (true) {
    std::uint32_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) break;
    std::string name(len, '\0');
    std::int64_t shape[2] = {0, 0};
    in.read(name.data(), len);
    in.read(reinterpret_cast<char*>(shape), sizeof(shape));
    if (!in || shape[0] < 0 || shape[1] < 0) throw Error("corrupt weight blob " + path.string());
    Matrix m(shape[0], shape[1]);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw Error("truncated weight blob " + path.string());
    blobs.emplace(std::move(name), std::move(m));
  }
  for (Parameter* p : params) {
    auto it = blobs.find(p->name);
    if (it == blobs.end()) throw MissingArtifact("tensor '" + p->name + "' missing from " + path.string());
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      throw ShapeError("tensor '" + p->name + "' has a different shape in " + path.string());
    p->value = it->second;
  }
}

}  // namespace merlin
