#include "homeostat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "homeostat/errors.hpp"

namespace homeostat {

namespace {

constexpr char kMagic[8] = {'H', 'M', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kFloat64 = 2;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void CheckpointFile::set(const std::string& section, std::string payload) {
  sections_[section] = std::move(payload);
}

bool CheckpointFile::has(const std::string& section) const {
  return sections_.count(section) > 0;
}

const std::string& CheckpointFile::get(const std::string& section) const {
  const auto it = sections_.find(section);
  if (it == sections_.end()) throw CheckpointError("missing section '" + section + "'");
  return it->second;
}

void CheckpointFile::write(const std::filesystem::path& path) const {
  ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(sections_.size()));
  for (const auto& [name, payload] : sections_) {
    w.str(name);
    w.u64(payload.size());
    w.raw(payload.data(), payload.size());
  }
  std::string bytes = w.take();
  const std::uint64_t hash = fnv1a(bytes.data(), bytes.size());
  bytes.append(reinterpret_cast<const char*>(&hash), sizeof hash);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile CheckpointFile::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic + 16 ||
      std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  bytes.resize(bytes.size() - sizeof stored);
  if (fnv1a(bytes.data(), bytes.size()) != stored) {
    throw CheckpointError(path.string() + " is corrupted (hash mismatch)");
  }
  ByteReader r(bytes, "header");
  char magic[sizeof kMagic];
  r.raw(magic, sizeof magic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported version " + std::to_string(version));
  }
  CheckpointFile file;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t n = r.u64();
    std::string payload(n, '\0');
    r.raw(payload.data(), n);
    file.sections_[std::move(name)] = std::move(payload);
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last section");
  return file;
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteWriter::raw(const void* data, std::size_t n) {
  buf_.append(static_cast<const char*>(data), n);
}

void ByteWriter::matrix(const std::string& name, const Matrix& m) {
  str(name);
  u32(2);
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  u8(kFloat64);
  raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Real));
}

void ByteReader::raw(void* out, std::size_t n) {
  if (n > data_.size() - pos_) {
    throw CheckpointError("section '" + section_ + "' is truncated");
  }
  std::memcpy(out, data_.data() + pos_, n);
  pos_ += n;
}

std::uint8_t ByteReader::u8() {
  std::uint8_t v;
  raw(&v, sizeof v);
  return v;
}
std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return v;
}
std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return v;
}
std::int64_t ByteReader::i64() {
  std::int64_t v;
  raw(&v, sizeof v);
  return v;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  if (n > data_.size() - pos_) {
    throw CheckpointError("section '" + section_ + "' is truncated");
  }
  std::string s(data_.data() + pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::matrix_into(const std::string& expected_name, Matrix& out) {
  const std::string name = str();
  if (name != expected_name) {
    throw CheckpointError("expected tensor '" + expected_name + "', found '" +
                          name + "'");
  }
  const std::uint32_t rank = u32();
  if (rank != 2) throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
  const std::uint64_t rows = u64();
  const std::uint64_t cols = u64();
  if (rows != static_cast<std::uint64_t>(out.rows()) ||
      cols != static_cast<std::uint64_t>(out.cols())) {
    throw CheckpointError("shape mismatch for '" + name + "': stored (" +
                          std::to_string(rows) + ", " + std::to_string(cols) +
                          "), model expects (" + std::to_string(out.rows()) +
                          ", " + std::to_string(out.cols()) + ")");
  }
  if (u8() != kFloat64) throw CheckpointError("tensor '" + name + "' has an unknown dtype");
  raw(out.data(), static_cast<std::size_t>(out.size()) * sizeof(Real));
}

std::string encode_weights(Transformer& model) {
  ByteWriter w;
  std::uint32_t count = 0;
  model.visit_parameters([&count](Parameter&) { ++count; });
  w.u32(count);
  model.visit_parameters([&w](Parameter& p) { w.matrix(p.name, p.value); });
  return w.take();
}

void decode_weights(const std::string& payload, Transformer& model) {
  ByteReader r(payload, "weights");
  std::uint32_t count = 0;
  model.visit_parameters([&count](Parameter&) { ++count; });
  if (r.u32() != count) throw CheckpointError("weight count differs from the model");
  model.visit_parameters([&r](Parameter& p) { r.matrix_into(p.name, p.value); });
  if (!r.done()) throw CheckpointError("unexpected bytes after weights");
}

std::string encode_caches(Transformer& model) {
  ByteWriter w;
  std::vector<std::pair<std::string, InsertLayer*>> with_cache;
  for (auto& entry : model.inserts()) {
    if (entry.second->has_cache()) with_cache.push_back(entry);
  }
  w.u32(static_cast<std::uint32_t>(with_cache.size()));
  for (auto& [name, layer] : with_cache) {
    const StatsCache& cache = layer->cache();
    w.str(name);
    w.u64(cache.heads());
    w.u64(cache.capacity());
    w.u64(cache.features());
    w.u64(cache.cursor());
    w.u64(cache.fill());
    for (Count c : cache.frames()) w.i64(c);
  }
  return w.take();
}

void decode_caches(const std::string& payload, Transformer& model) {
  ByteReader r(payload, "caches");
  std::vector<std::pair<std::string, InsertLayer*>> with_cache;
  for (auto& entry : model.inserts()) {
    if (entry.second->has_cache()) with_cache.push_back(entry);
  }
  if (r.u32() != with_cache.size()) {
    throw CheckpointError("statistics cache count differs from the model");
  }
  for (auto& [name, layer] : with_cache) {
    const std::string stored = r.str();
    if (stored != name) {
      throw CheckpointError("expected cache '" + name + "', found '" + stored + "'");
    }
    const std::uint64_t heads = r.u64(), capacity = r.u64(), features = r.u64();
    const std::uint64_t cursor = r.u64(), fill = r.u64();
    StatsCache& cache = layer->cache();
    if (heads != cache.heads() || capacity != cache.capacity() ||
        features != cache.features()) {
      throw CheckpointError("shape mismatch for cache '" + name + "'");
    }
    std::vector<Count> frames(heads * capacity * features);
    for (auto& c : frames) c = r.i64();
    try {
      cache = StatsCache::restore(heads, capacity, features, std::move(frames),
                                  cursor, fill);
    } catch (const InvalidInput& e) {
      throw CheckpointError(std::string("cache '") + name + "': " + e.what());
    }
  }
  if (!r.done()) throw CheckpointError("unexpected bytes after caches");
}

}  // namespace homeostat
