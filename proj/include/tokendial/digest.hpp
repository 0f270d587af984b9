#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>

namespace tokendial {

// Incremental SHA-256 (OpenSSL EVP) with hex output.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::string hex();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view data);

}  // namespace tokendial
