#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "daefuse/daefuse.hpp"

namespace support {

namespace fs = std::filesystem;

/// Fresh directory named after the running test, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / ("daefuse_" + std::string(info->test_suite_name()) + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

inline void write_pairs(const fs::path& root, const std::vector<daefuse::ImagePair>& pairs) {
  for (const auto& p : pairs) {
    daefuse::save_image(root / "a" / p.a.source_id(), p.a);
    daefuse::save_image(root / "b" / p.b.source_id(), p.b);
  }
}

/// Expects `expr` to throw daefuse::Error of the given kind.
#define EXPECT_ERROR_KIND(expr, expected_kind)                                              \
  do {                                                                                      \
    try {                                                                                   \
      (void)(expr);                                                                         \
      ADD_FAILURE() << "expected " << daefuse::to_string(expected_kind) << " from " #expr; \
    } catch (const daefuse::Error& e) {                                                     \
      EXPECT_EQ(daefuse::to_string(e.kind()), daefuse::to_string(expected_kind)) << e.what(); \
    }                                                                                       \
  } while (0)

}  // namespace support
