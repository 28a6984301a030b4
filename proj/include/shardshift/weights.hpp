#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "shardshift/core.hpp"

namespace shardshift {

class GroupHandle;

/// Dense row-major matrix of doubles, used only at toy scale.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

enum class TensorKind { QKV, O, Up, Down };
enum class ShardDim { Column, Row };

std::string_view to_string(TensorKind k);

/// QKV and Up are column-parallel; O and Down are row-parallel.
ShardDim shard_dim_of(TensorKind k);

struct ToyDims {
  int hidden_dim = 8;
  int num_heads = 2;
  int head_dim = 4;
  int ffn_dim = 0;  // 0 -> 2 * hidden_dim
};

struct SyntheticScale {};

using WeightScale = std::variant<ToyDims, SyntheticScale>;

constexpr int kMaxToyAxis = 256;

struct TensorShape {
  int rows = 0;
  int cols = 0;
};

/// Per-engine parameter storage. Loaded once; never reallocated afterwards.
///
/// Fused QKV layout: columns are grouped by head, each head contributing
/// [Q_h | K_h | V_h] (3 * head_dim columns). Any contiguous column range that
/// starts and ends on a head boundary therefore carries complete Q, K and V
/// sub-blocks for its heads, so a rank's column shard is a single contiguous
/// slice for every degree that divides the head count.
class WeightStore {
 public:
  static WeightStore load(const ModelSpec& spec, std::uint64_t seed, const WeightScale& scale);

  bool is_toy() const { return toy_; }
  int num_layers() const { return num_layers_; }
  int hidden_dim() const { return hidden_dim_; }
  int num_heads() const { return num_heads_; }
  int head_dim() const { return head_dim_; }
  int ffn_dim() const { return ffn_dim_; }
  std::uint64_t alloc_bytes_total() const { return alloc_bytes_; }
  std::uint64_t generation() const { return generation_; }

  TensorShape shape(TensorKind k) const;
  /// Toy stores only. Synthetic stores have no element storage.
  const Matrix& tensor(int layer, TensorKind k) const;
  Matrix& mutable_tensor(int layer, TensorKind k);

  void dump(const std::string& path) const;
  static WeightStore read(const std::string& path);

 private:
  bool toy_ = false;
  int num_layers_ = 0;
  int hidden_dim_ = 0;
  int num_heads_ = 0;
  int head_dim_ = 0;
  int ffn_dim_ = 0;
  std::uint64_t alloc_bytes_ = 0;
  std::uint64_t generation_ = 0;
  std::vector<Matrix> tensors_;  // layer-major, 4 per layer

  void allocate_toy();
};

/// A rank's slice of one tensor, addressing the store's memory directly.
struct ShardView {
  const WeightStore* source = nullptr;
  int layer = 0;
  TensorKind tensor = TensorKind::QKV;
  ShardDim shard_dim = ShardDim::Column;
  int rank = 0;
  int degree = 1;
  int offset = 0;   // first row/column along shard_dim
  int extent = 0;   // rows/columns along shard_dim
  TensorShape full{};

  int rows() const { return shard_dim == ShardDim::Row ? extent : full.rows; }
  int cols() const { return shard_dim == ShardDim::Column ? extent : full.cols; }
  /// Element (i, j) of the view; reads the store in place.
  double at(int i, int j) const;
  const double* data() const;  // base pointer of the full tensor (toy only)
};

ShardView make_shard_view(const WeightStore& store, int layer, TensorKind tensor, int rank, int degree);

struct ActiveViews {
  int degree = 1;
  int rank = 0;
  std::vector<ShardView> views;  // layer-major, 4 per layer

  const ShardView& get(int layer, TensorKind k) const { return views[static_cast<std::size_t>(layer) * 4 + static_cast<int>(k)]; }
};

/// Re-activate the store under `new_degree`. Only builds views; allocates nothing.
ActiveViews switch_weight_mode(const WeightStore& store, int new_degree, int rank,
                               std::span<const int> supported_degrees);

/// Sharded forward over all layers: per layer, column-parallel QKV, V passthrough
/// in place of attention, row-parallel O with one all-reduce, then column-parallel
/// Up and row-parallel Down with a second all-reduce. Residuals are not applied.
/// `handle` may be null for a degree-1 group; otherwise its members must equal `group`.
Matrix tp_forward_toy(std::span<const WeightStore* const> stores, std::span<const Rank> group, const Matrix& x,
                      GroupHandle* handle);

}  // namespace shardshift
