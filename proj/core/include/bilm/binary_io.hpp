#pragma once

// Little-endian helpers shared by the tokenizer, corpus and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "bilm/error.hpp"

namespace bilm::binio {

template <class T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

inline void put_bytes(std::string& out, std::string_view bytes) { out.append(bytes); }

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    require(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view get_bytes(size_t n) {
    require(n);
    std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void require(size_t n) const {
    if (data_.size() - pos_ < n) {
      throw ValidationError("truncated binary payload");
    }
  }

  std::string_view data_;
  size_t pos_ = 0;
};

}  // namespace bilm::binio
