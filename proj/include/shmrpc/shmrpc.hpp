#pragma once

#include "shmrpc/arena.hpp"
#include "shmrpc/backoff.hpp"
#include "shmrpc/codec.hpp"
#include "shmrpc/error.hpp"
#include "shmrpc/frame.hpp"
#include "shmrpc/region.hpp"
#include "shmrpc/ring_channel.hpp"
#include "shmrpc/rpc.hpp"
#include "shmrpc/stub.hpp"
#include "shmrpc/tcp_baseline.hpp"
