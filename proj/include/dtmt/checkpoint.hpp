#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <tuple>
#include <string>
#include <vector>

#include "dtmt/optim.hpp"
#include "dtmt/parameters.hpp"
#include "dtmt/vocab.hpp"

namespace dtmt {

// Container layout, all integers little-endian:
//   "DTCK"  u32 version  u64 count
//   count × { u32 name_len, name bytes (UTF-8), u32 rank, rank × u64 extent, numel × f64 }
inline constexpr char kCheckpointMagic[4] = {'D', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("checkpoint '" + path_ + "' is truncated");
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, tensors.size());
  for (const auto& t : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) detail::put_u64(out, e);
    for (double v : t.value.span()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline std::vector<NamedTensor> decode_container(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw DataError("'" + path + "' is not a DTCK checkpoint");
  const auto version = r.u(4);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  }
  const auto count = r.u(8);
  std::vector<NamedTensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.bytes(static_cast<std::size_t>(r.u(4)));
    const auto rank = r.u(4);
    if (rank > 8) throw DataError("checkpoint '" + path + "': tensor '" + t.name + "' has implausible rank");
    Shape s;
    for (std::uint64_t i = 0; i < rank; ++i) s.push_back(static_cast<std::size_t>(r.u(8)));
    std::vector<double> vals(shape_numel(s));
    for (auto& v : vals) v = std::bit_cast<double>(r.u(8));
    t.value = Tensor(std::move(s), std::move(vals));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("checkpoint '" + path + "' has trailing bytes");
  return out;
}

/// Writes via a temporary file and rename, so a crash never leaves a partial checkpoint.
inline void write_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + tmp + "'");
    const std::string bytes = encode_container(tensors);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes, path);
}

inline const Tensor* find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts)
    if (t.name == name) return &t.value;
  return nullptr;
}

/// 64-bit hash stored exactly as two 32-bit halves.
inline Tensor hash_tensor(std::uint64_t h) {
  return Tensor::vector({static_cast<double>(h >> 32), static_cast<double>(h & 0xffffffffULL)});
}
inline std::uint64_t tensor_hash(const Tensor& t) {
  if (t.size() != 2) throw DataError("malformed hash tensor");
  return (static_cast<std::uint64_t>(t[0]) << 32) | static_cast<std::uint64_t>(t[1]);
}

inline std::vector<NamedTensor> params_to_tensors(const ParamStore& ps) {
  std::vector<NamedTensor> out;
  for (const auto& p : ps) out.push_back({p->name, p->value});
  return out;
}

/// Model checkpoint: every parameter plus the vocabulary hashes.
inline void save_checkpoint(const std::string& path, const ParamStore& ps, const Vocabulary& src, const Vocabulary& tgt) {
  auto ts = params_to_tensors(ps);
  ts.push_back({"meta.src_vocab_hash", hash_tensor(src.hash())});
  ts.push_back({"meta.tgt_vocab_hash", hash_tensor(tgt.hash())});
  write_container(path, ts);
}

/// Copies checkpoint values into matching parameters; names and shapes must agree.
inline void load_params(ParamStore& ps, const std::vector<NamedTensor>& ts) {
  for (auto& p : ps) {
    const Tensor* t = find_tensor(ts, p->name);
    if (!t) throw DataError("checkpoint lacks parameter '" + p->name + "'");
    if (t->shape() != p->value.shape()) {
      throw DataError("checkpoint parameter '" + p->name + "' has shape " + shape_str(t->shape()) + ", model expects " +
                      shape_str(p->value.shape()));
    }
    p->value = *t;
  }
}

/// Checks stored vocabulary hashes against the vocabularies in use.
inline void check_vocab_hashes(const std::vector<NamedTensor>& ts, const Vocabulary& src, const Vocabulary& tgt) {
  for (const auto& [key, vocab, label] : {std::tuple{"meta.src_vocab_hash", &src, "source"},
                                          std::tuple{"meta.tgt_vocab_hash", &tgt, "target"}}) {
    const Tensor* t = find_tensor(ts, key);
    if (!t) throw DataError(std::string("checkpoint lacks ") + key);
    const auto stored = tensor_hash(*t);
    if (stored != vocab->hash()) {
      throw DataError(std::string(label) + " vocabulary mismatch: checkpoint " + hex64(stored) + " vs supplied " +
                      hex64(vocab->hash()));
    }
  }
}

/// Training progress stored next to a checkpoint, in the same container format.
struct TrainProgress {
  std::int64_t step = 0;
  double best_metric = -1.0;
  std::int64_t bad_validations = 0;
  std::int64_t validations = 0;
};

inline void save_optimizer_state(const std::string& path, const ParamStore& ps, const AdamState& st,
                                 const TrainProgress& pr) {
  std::vector<NamedTensor> ts;
  ts.push_back({"adam.step", Tensor::scalar(static_cast<double>(st.step))});
  ts.push_back({"train.step", Tensor::scalar(static_cast<double>(pr.step))});
  ts.push_back({"train.best_metric", Tensor::scalar(pr.best_metric)});
  ts.push_back({"train.bad_validations", Tensor::scalar(static_cast<double>(pr.bad_validations))});
  ts.push_back({"train.validations", Tensor::scalar(static_cast<double>(pr.validations))});
  for (std::size_t k = 0; k < ps.size(); ++k) {
    ts.push_back({"adam.m." + ps[k].name, st.m[k]});
    ts.push_back({"adam.v." + ps[k].name, st.v[k]});
  }
  write_container(path, ts);
}

inline void load_optimizer_state(const std::string& path, const ParamStore& ps, AdamState& st, TrainProgress& pr) {
  auto ts = read_container(path);
  auto scalar = [&](const char* n) {
    const Tensor* t = find_tensor(ts, n);
    if (!t) throw DataError("optimizer state '" + path + "' lacks " + n);
    return t->item();
  };
  st = AdamState::for_params(ps);
  st.step = static_cast<std::int64_t>(scalar("adam.step"));
  pr.step = static_cast<std::int64_t>(scalar("train.step"));
  pr.best_metric = scalar("train.best_metric");
  pr.bad_validations = static_cast<std::int64_t>(scalar("train.bad_validations"));
  pr.validations = static_cast<std::int64_t>(scalar("train.validations"));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const Tensor* m = find_tensor(ts, "adam.m." + ps[k].name);
    const Tensor* v = find_tensor(ts, "adam.v." + ps[k].name);
    if (!m || !v) throw DataError("optimizer state lacks moments of '" + ps[k].name + "'");
    if (m->shape() != ps[k].value.shape() || v->shape() != ps[k].value.shape()) {
      throw DataError("optimizer moments of '" + ps[k].name + "' have the wrong shape");
    }
    st.m[k] = *m;
    st.v[k] = *v;
  }
}

}  // namespace dtmt
