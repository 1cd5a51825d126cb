#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace merlin {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using TokenIds = std::vector<int>;

/// A named weight tensor. `trainable` is the freeze flag: the optimizer and
/// the autodiff tape ignore parameters with `trainable == false`.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool train = false)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  Index numel() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamRefs = std::vector<Parameter*>;

Matrix gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng);

bool all_finite(const Matrix& m);

/// Hex SHA-256 over (name, shape, raw values) of every parameter, in the
/// order given. Callers pass parameters in a stable order.
std::string digest(std::span<Parameter* const> params);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Binary blob: repeated [u32 name_len][name][i64 rows][i64 cols][f64 data...].
void save_blob(const std::filesystem::path& path, std::span<Parameter* const> params);
/// Loads values by name into the given parameters; every parameter must be
/// present with a matching shape.
void load_blob(const std::filesystem::path& path, std::span<Parameter* const> params);

}  // namespace merlin
