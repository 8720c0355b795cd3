#pragma once

// Copying task: given <BOS> s <SEP>, emit s followed by <EOS>. Samples are
// drawn online; a batch is a token matrix plus the shifted targets and a
// loss mask selecting the supervised positions.

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crn/random.hpp"
#include "crn/tensor.hpp"

namespace crn {

// 26 letters plus three specials; fixed id assignment.
struct Vocab {
  static constexpr int letters = 26;
  static constexpr std::int32_t BOS = 26;
  static constexpr std::int32_t SEP = 27;
  static constexpr std::int32_t EOS = 28;
  static constexpr int size = 29;

  static char to_char(std::int32_t id) {
    if (id >= 0 && id < letters) return static_cast<char>('a' + id);
    if (id == BOS) return '^';
    if (id == SEP) return '|';
    if (id == EOS) return '$';
    return '?';
  }
};

enum class MaskMode { CopyOnly, AllPositions };

inline const char* to_string(MaskMode m) {
  return m == MaskMode::CopyOnly ? "copy_only" : "all_positions";
}

// Rows laid out as BOS s_1..s_L SEP s_1..s_L (length 2L+2). targets are the
// tokens shifted left by one with EOS as the final target.
struct CopyBatch {
  int batch = 0;
  int seq = 0;  // 2L + 2
  int L = 0;
  std::vector<std::int32_t> tokens;   // batch * seq
  std::vector<std::int32_t> targets;  // batch * seq
  std::vector<std::uint8_t> mask;     // batch * seq
};

inline int copy_seq_len(int L) { return 2 * L + 2; }

// Uniform i.i.d. letters, deterministic given the generator state.
// CopyOnly supervises the L+1 predictions after SEP (the copied string and
// the final EOS); AllPositions supervises every next-token position.
inline CopyBatch generate_batch(Pcg32& rng, int L, int batch, MaskMode mode) {
  if (L < 1 || batch < 1) {
    throw std::invalid_argument("generate_batch: L and batch must be >= 1");
  }
  CopyBatch b;
  b.batch = batch;
  b.L = L;
  b.seq = copy_seq_len(L);
  b.tokens.resize(static_cast<std::size_t>(batch) * b.seq);
  b.targets.resize(b.tokens.size());
  b.mask.assign(b.tokens.size(), 0);
  for (int r = 0; r < batch; ++r) {
    std::int32_t* row = b.tokens.data() + static_cast<std::size_t>(r) * b.seq;
    row[0] = Vocab::BOS;
    for (int i = 0; i < L; ++i) {
      row[1 + i] = static_cast<std::int32_t>(rng.next_below(Vocab::letters));
    }
    row[L + 1] = Vocab::SEP;
    for (int i = 0; i < L; ++i) row[L + 2 + i] = row[1 + i];
    std::int32_t* tgt = b.targets.data() + static_cast<std::size_t>(r) * b.seq;
    for (int t = 0; t < b.seq - 1; ++t) tgt[t] = row[t + 1];
    tgt[b.seq - 1] = Vocab::EOS;
    std::uint8_t* msk = b.mask.data() + static_cast<std::size_t>(r) * b.seq;
    if (mode == MaskMode::AllPositions) {
      for (int t = 0; t < b.seq; ++t) msk[t] = 1;
    } else {
      for (int t = L + 1; t < b.seq; ++t) msk[t] = 1;
    }
  }
  return b;
}

inline CopyBatch generate_batch(std::uint64_t seed, int L, int batch,
                                MaskMode mode) {
  Pcg32 rng(seed);
  return generate_batch(rng, L, batch, mode);
}

// Fraction of masked positions whose argmax prediction equals the target.
template <class T>
double parallel_accuracy(const TensorT<T>& logits, const CopyBatch& batch) {
  const int V = logits.shape.back();
  const std::int64_t rows = logits.numel() / V;
  if (rows != static_cast<std::int64_t>(batch.tokens.size())) {
    throw std::invalid_argument("parallel_accuracy: logits rows (" +
                                std::to_string(rows) +
                                ") do not match batch positions (" +
                                std::to_string(batch.tokens.size()) + ")");
  }
  std::int64_t total = 0, hit = 0;
  const T* px = logits.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!batch.mask[static_cast<std::size_t>(r)]) continue;
    const T* row = px + r * V;
    int best = 0;
    for (int v = 1; v < V; ++v) {
      if (row[v] > row[best]) best = v;
    }
    ++total;
    if (best == batch.targets[static_cast<std::size_t>(r)]) ++hit;
  }
  if (total == 0) {
    throw std::invalid_argument("parallel_accuracy: empty mask");
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

// Parses a token row back into its (BOS, s, SEP, s) layout; throws when the
// structure is violated. Round-trip check for generated data.
inline std::string detokenize_copy_row(const std::int32_t* row, int seq) {
  if (seq < 4 || seq % 2 != 0) {
    throw std::invalid_argument("detokenize: invalid sequence length");
  }
  const int L = (seq - 2) / 2;
  if (row[0] != Vocab::BOS) throw std::invalid_argument("detokenize: no BOS");
  if (row[L + 1] != Vocab::SEP) throw std::invalid_argument("detokenize: no SEP");
  std::string s;
  for (int i = 0; i < L; ++i) {
    const std::int32_t id = row[1 + i];
    if (id < 0 || id >= Vocab::letters) {
      throw std::invalid_argument("detokenize: non-letter in string body");
    }
    if (row[L + 2 + i] != id) {
      throw std::invalid_argument("detokenize: copy half does not match");
    }
    s.push_back(Vocab::to_char(id));
  }
  return s;
}

// Dump format: header "L=<n> vocab=29", one sample per line, ids separated
// by single spaces.
inline void write_samples(std::ostream& os, const CopyBatch& b) {
  os << "L=" << b.L << " vocab=" << Vocab::size << "\n";
  for (int r = 0; r < b.batch; ++r) {
    const std::int32_t* row = b.tokens.data() + static_cast<std::size_t>(r) * b.seq;
    for (int t = 0; t < b.seq; ++t) {
      if (t) os << ' ';
      os << row[t];
    }
    os << "\n";
  }
}

inline CopyBatch read_samples(std::istream& is, MaskMode mode = MaskMode::CopyOnly) {
  std::string header;
  if (!std::getline(is, header)) {
    throw std::invalid_argument("read_samples: missing header");
  }
  int L = 0, vocab = 0;
  if (std::sscanf(header.c_str(), "L=%d vocab=%d", &L, &vocab) != 2 ||
      vocab != Vocab::size || L < 1) {
    throw std::invalid_argument("read_samples: bad header '" + header + "'");
  }
  CopyBatch b;
  b.L = L;
  b.seq = copy_seq_len(L);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::int32_t id;
    int count = 0;
    while (ls >> id) {
      if (id < 0 || id >= Vocab::size) {
        throw std::invalid_argument("read_samples: id out of range");
      }
      b.tokens.push_back(id);
      ++count;
    }
    if (count != b.seq) {
      throw std::invalid_argument("read_samples: row length " +
                                  std::to_string(count) + " != " +
                                  std::to_string(b.seq));
    }
    ++b.batch;
  }
  b.targets.resize(b.tokens.size());
  b.mask.assign(b.tokens.size(), 0);
  for (int r = 0; r < b.batch; ++r) {
    const std::int32_t* row = b.tokens.data() + static_cast<std::size_t>(r) * b.seq;
    std::int32_t* tgt = b.targets.data() + static_cast<std::size_t>(r) * b.seq;
    std::uint8_t* msk = b.mask.data() + static_cast<std::size_t>(r) * b.seq;
    for (int t = 0; t < b.seq - 1; ++t) tgt[t] = row[t + 1];
    tgt[b.seq - 1] = Vocab::EOS;
    for (int t = (mode == MaskMode::AllPositions ? 0 : L + 1); t < b.seq; ++t) {
      msk[t] = 1;
    }
  }
  return b;
}

}  // namespace crn
