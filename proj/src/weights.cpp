#include "shardshift/weights.hpp"

#include <cmath>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <utility>

#include "shardshift/comms.hpp"

namespace shardshift {

std::string_view to_string(TensorKind k) {
  switch (k) {
    case TensorKind::QKV: return "qkv";
    case TensorKind::O: return "o";
    case TensorKind::Up: return "up";
    case TensorKind::Down: return "down";
  }
  return "?";
}

ShardDim shard_dim_of(TensorKind k) {
  return (k == TensorKind::QKV || k == TensorKind::Up) ? ShardDim::Column : ShardDim::Row;
}

namespace {

constexpr std::array<TensorKind, 4> kKinds{TensorKind::QKV, TensorKind::O, TensorKind::Up, TensorKind::Down};
constexpr char kMagic[4] = {'F', 'L', 'Y', 'W'};
constexpr std::uint32_t kDumpVersion = 1;

std::size_t slot(int layer, TensorKind k) { return static_cast<std::size_t>(layer) * 4 + static_cast<std::size_t>(k); }

}  // namespace

WeightStore WeightStore::load(const ModelSpec& spec, std::uint64_t seed, const WeightScale& scale) {
  if (spec.num_layers <= 0) throw Error(ErrorCode::InvalidModelSpec, "num_layers must be positive");
  WeightStore s;
  s.num_layers_ = spec.num_layers;
  if (const auto* toy = std::get_if<ToyDims>(&scale)) {
    s.toy_ = true;
    s.hidden_dim_ = toy->hidden_dim;
    s.num_heads_ = toy->num_heads;
    s.head_dim_ = toy->head_dim;
    s.ffn_dim_ = toy->ffn_dim > 0 ? toy->ffn_dim : 2 * toy->hidden_dim;
    const int proj = s.num_heads_ * s.head_dim_;
    if (s.hidden_dim_ <= 0 || s.num_heads_ <= 0 || s.head_dim_ <= 0) {
      throw Error(ErrorCode::InvalidModelSpec, "toy dims must be positive");
    }
    for (int axis : {s.hidden_dim_, 3 * proj, s.ffn_dim_}) {
      if (axis > kMaxToyAxis) {
        throw Error(ErrorCode::ToyDimsTooLarge, "axis " + std::to_string(axis) + " exceeds " + std::to_string(kMaxToyAxis));
      }
    }
    s.allocate_toy();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    // Entries lie in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    for (auto& m : s.tensors_) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(m.rows));
      for (auto& v : m.data) v = scale * dist(rng);
    }
  } else {
    // Placeholder geometry (MHA-shaped, 4x FFN) for view arithmetic; bytes come from the spec.
    s.hidden_dim_ = spec.hidden_dim;
    s.head_dim_ = spec.head_dim;
    s.num_heads_ = spec.hidden_dim / std::max(1, spec.head_dim);
    s.ffn_dim_ = 4 * spec.hidden_dim;
    s.alloc_bytes_ = spec.weight_bytes;
  }
  s.generation_ = 1;
  return s;
}

void WeightStore::allocate_toy() {
  tensors_.clear();
  tensors_.reserve(static_cast<std::size_t>(num_layers_) * 4);
  alloc_bytes_ = 0;
  for (int l = 0; l < num_layers_; ++l) {
    for (auto k : kKinds) {
      auto sh = shape(k);
      tensors_.emplace_back(sh.rows, sh.cols);
      alloc_bytes_ += static_cast<std::uint64_t>(sh.rows) * static_cast<std::uint64_t>(sh.cols) * sizeof(double);
    }
  }
}

TensorShape WeightStore::shape(TensorKind k) const {
  const int proj = num_heads_ * head_dim_;
  switch (k) {
    case TensorKind::QKV: return {hidden_dim_, 3 * proj};
    case TensorKind::O: return {proj, hidden_dim_};
    case TensorKind::Up: return {hidden_dim_, ffn_dim_};
    case TensorKind::Down: return {ffn_dim_, hidden_dim_};
  }
  return {};
}

const Matrix& WeightStore::tensor(int layer, TensorKind k) const {
  if (!toy_) throw Error(ErrorCode::InvalidModelSpec, "synthetic store has no element storage");
  if (layer < 0 || layer >= num_layers_) throw Error(ErrorCode::RankOutOfRange, "layer out of range");
  return tensors_[slot(layer, k)];
}

Matrix& WeightStore::mutable_tensor(int layer, TensorKind k) {
  return const_cast<Matrix&>(std::as_const(*this).tensor(layer, k));
}

// Header (32 bytes, little-endian): magic[4], version, layers, hidden, heads,
// head_dim, ffn, reserved. Then every tensor's doubles, layer-major.
void WeightStore::dump(const std::string& path) const {
  if (!toy_) throw Error(ErrorCode::InvalidModelSpec, "only toy stores can be dumped");
  static_assert(std::endian::native == std::endian::little, "dump format assumes a little-endian host");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  std::array<std::uint32_t, 7> hdr{kDumpVersion,
                                   static_cast<std::uint32_t>(num_layers_),
                                   static_cast<std::uint32_t>(hidden_dim_),
                                   static_cast<std::uint32_t>(num_heads_),
                                   static_cast<std::uint32_t>(head_dim_),
                                   static_cast<std::uint32_t>(ffn_dim_),
                                   0};
  f.write(kMagic, 4);
  f.write(reinterpret_cast<const char*>(hdr.data()), sizeof(hdr));
  for (const auto& m : tensors_) {
    f.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  }
}

WeightStore WeightStore::read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot read '" + path + "'");
  char magic[4];
  std::array<std::uint32_t, 7> hdr{};
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(hdr.data()), sizeof(hdr));
  if (!f || std::memcmp(magic, kMagic, 4) != 0 || hdr[0] != kDumpVersion) {
    throw Error(ErrorCode::IoError, "'" + path + "' is not a weight dump");
  }
  WeightStore s;
  s.toy_ = true;
  s.num_layers_ = static_cast<int>(hdr[1]);
  s.hidden_dim_ = static_cast<int>(hdr[2]);
  s.num_heads_ = static_cast<int>(hdr[3]);
  s.head_dim_ = static_cast<int>(hdr[4]);
  s.ffn_dim_ = static_cast<int>(hdr[5]);
  s.allocate_toy();
  for (auto& m : s.tensors_) {
    f.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  }
  if (!f) throw Error(ErrorCode::IoError, "'" + path + "' is truncated");
  s.generation_ = 1;
  return s;
}

double ShardView::at(int i, int j) const {
  const double* base = data();
  if (shard_dim == ShardDim::Column) return base[static_cast<std::size_t>(i) * full.cols + offset + j];
  return base[static_cast<std::size_t>(offset + i) * full.cols + j];
}

const double* ShardView::data() const { return source->tensor(layer, tensor).data.data(); }

ShardView make_shard_view(const WeightStore& store, int layer, TensorKind tensor, int rank, int degree) {
  if (degree < 1 || rank < 0 || rank >= degree) {
    throw Error(ErrorCode::RankOutOfRange, "rank " + std::to_string(rank) + " of degree " + std::to_string(degree));
  }
  if (layer < 0 || layer >= store.num_layers()) throw Error(ErrorCode::RankOutOfRange, "layer out of range");
  ShardView v;
  v.source = &store;
  v.layer = layer;
  v.tensor = tensor;
  v.shard_dim = shard_dim_of(tensor);
  v.rank = rank;
  v.degree = degree;
  v.full = store.shape(tensor);
  const int full_extent = v.shard_dim == ShardDim::Column ? v.full.cols : v.full.rows;
  if (full_extent % degree != 0) {
    throw Error(ErrorCode::IndivisibleExtent,
                std::to_string(degree) + " does not divide extent " + std::to_string(full_extent));
  }
  // Attention tensors must split on head boundaries.
  if ((tensor == TensorKind::QKV || tensor == TensorKind::O) && store.num_heads() % degree != 0) {
    throw Error(ErrorCode::IndivisibleExtent,
                std::to_string(degree) + " does not divide head count " + std::to_string(store.num_heads()));
  }
  v.extent = full_extent / degree;
  v.offset = rank * v.extent;
  return v;
}

ActiveViews switch_weight_mode(const WeightStore& store, int new_degree, int rank, std::span<const int> supported_degrees) {
  if (new_degree != 1 &&
      std::find(supported_degrees.begin(), supported_degrees.end(), new_degree) == supported_degrees.end()) {
    throw Error(ErrorCode::UnsupportedDegree, "degree " + std::to_string(new_degree) + " is not supported");
  }
  ActiveViews out;
  out.degree = new_degree;
  out.rank = rank;
  out.views.reserve(static_cast<std::size_t>(store.num_layers()) * 4);
  for (int l = 0; l < store.num_layers(); ++l) {
    for (auto k : kKinds) out.views.push_back(make_shard_view(store, l, k, rank, new_degree));
  }
  return out;
}

namespace {

// out[t][c] = sum_k x[t][k] * view(k, c)
Matrix matmul_view(const Matrix& x, const ShardView& w) {
  Matrix out(x.rows, w.cols());
  for (int t = 0; t < x.rows; ++t) {
    for (int k = 0; k < w.rows(); ++k) {
      const double xv = x(t, k);
      for (int c = 0; c < w.cols(); ++c) out(t, c) += xv * w.at(k, c);
    }
  }
  return out;
}

// V sub-block of each local head stands in for the attention output.
Matrix value_passthrough(const Matrix& qkv, int local_heads, int head_dim) {
  Matrix attn(qkv.rows, local_heads * head_dim);
  for (int t = 0; t < qkv.rows; ++t) {
    for (int h = 0; h < local_heads; ++h) {
      for (int d = 0; d < head_dim; ++d) attn(t, h * head_dim + d) = qkv(t, h * 3 * head_dim + 2 * head_dim + d);
    }
  }
  return attn;
}

std::vector<Matrix> reduce_partials(std::vector<Matrix> partials, GroupHandle* handle) {
  if (partials.size() == 1) return partials;
  std::vector<std::vector<double>> payloads;
  payloads.reserve(partials.size());
  for (auto& p : partials) payloads.push_back(std::move(p.data));
  auto reduced = all_reduce(*handle, payloads);
  for (std::size_t r = 0; r < partials.size(); ++r) partials[r].data = std::move(reduced[r]);
  return partials;
}

}  // namespace

Matrix tp_forward_toy(std::span<const WeightStore* const> stores, std::span<const Rank> group, const Matrix& x,
                      GroupHandle* handle) {
  const auto m = static_cast<int>(group.size());
  if (m == 0 || stores.size() != group.size()) {
    throw Error(ErrorCode::GroupSizeMismatch,
                std::to_string(stores.size()) + " stores for a group of " + std::to_string(group.size()));
  }
  if (m > 1) {
    if (handle == nullptr || handle->size() != group.size() ||
        !std::equal(group.begin(), group.end(), handle->members().begin())) {
      throw Error(ErrorCode::GroupSizeMismatch, "collective handle does not match group " + format_group(group));
    }
  }
  for (const auto* s : stores) {
    if (s == nullptr || !s->is_toy()) throw Error(ErrorCode::InvalidModelSpec, "tp_forward_toy needs toy stores");
    if (s->hidden_dim() != x.cols) throw Error(ErrorCode::GroupSizeMismatch, "input width does not match hidden_dim");
  }
  const auto& ref = *stores.front();
  const int local_heads = ref.num_heads() / std::max(1, m);

  std::vector<Matrix> act(static_cast<std::size_t>(m), x);
  for (int l = 0; l < ref.num_layers(); ++l) {
    std::vector<Matrix> partials;
    for (int r = 0; r < m; ++r) {
      const auto& s = *stores[static_cast<std::size_t>(r)];
      auto qkv = matmul_view(act[static_cast<std::size_t>(r)], make_shard_view(s, l, TensorKind::QKV, r, m));
      auto attn = value_passthrough(qkv, local_heads, s.head_dim());
      partials.push_back(matmul_view(attn, make_shard_view(s, l, TensorKind::O, r, m)));
    }
    act = reduce_partials(std::move(partials), handle);

    partials.clear();
    for (int r = 0; r < m; ++r) {
      const auto& s = *stores[static_cast<std::size_t>(r)];
      auto hidden = matmul_view(act[static_cast<std::size_t>(r)], make_shard_view(s, l, TensorKind::Up, r, m));
      partials.push_back(matmul_view(hidden, make_shard_view(s, l, TensorKind::Down, r, m)));
    }
    act = reduce_partials(std::move(partials), handle);
  }
  return act.front();
}

}  // namespace shardshift
