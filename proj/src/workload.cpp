#include "lotus/workload.hpp"

#include <cmath>

namespace lotus {

ZipfGen::ZipfGen(u64 n, double theta) : n_(n), theta_(theta) {
  auto zeta = [theta](u64 upper) {
    double z = 0;
    for (u64 i = 1; i <= upper; i++) z += 1.0 / std::pow(static_cast<double>(i), theta);
    return z;
  };
  zetan_ = zeta(n);
  zeta2_ = zeta(2);
  alpha_ = 1.0 / (1.0 - theta);
  eta_ = (1.0 - std::pow(2.0 / static_cast<double>(n), 1.0 - theta)) /
         (1.0 - zeta2_ / zetan_);
}

u64 ZipfGen::next(std::mt19937_64& rng) {
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double uz = u * zetan_;
  if (uz < 1.0) return 0;
  if (uz < 1.0 + std::pow(0.5, theta_)) return 1;
  u64 v = static_cast<u64>(static_cast<double>(n_) *
                           std::pow(eta_ * u - eta_ + 1.0, alpha_));
  return v >= n_ ? n_ - 1 : v;
}

namespace {

// Scrambles zipf ranks so heat spreads across shards instead of pooling in
// shard 0.
u64 scramble(u64 rank, u64 n) { return mix64(rank) % n; }

struct KeyPicker {
  const WorkloadSpec& spec;
  std::unique_ptr<ZipfGen> zipf;

  explicit KeyPicker(const WorkloadSpec& s) : spec(s) {
    if (s.dist == AccessDist::Zipfian && s.zipf_theta > 0)
      zipf = std::make_unique<ZipfGen>(s.scale, s.zipf_theta);
  }

  u64 pick(std::mt19937_64& rng) const {
    if (zipf) return scramble(zipf->next(rng), spec.scale);
    return rng() % spec.scale;
  }

  // All RW traffic confined to one shard when hot_shard is set.
  u64 pick_hot(std::mt19937_64& rng) const {
    u64 stride = spec.scale / kNumShards;
    if (stride == 0) return static_cast<u64>(spec.hot_shard) % spec.scale;
    u64 k = rng() % stride;
    return (static_cast<u64>(spec.hot_shard) + k * kNumShards) % spec.scale;
  }

  u64 pick_rw(std::mt19937_64& rng) const {
    return spec.hot_shard >= 0 ? pick_hot(rng) : pick(rng);
  }
};

struct KvsWorkload : Workload {
  KeyPicker picker;
  u32 record_len = 40;

  explicit KvsWorkload(const WorkloadSpec& s) : picker(s) { spec = s; }

  LotusKey key_of(u64 id, u16) const override {
    TableKeySpec ks;
    ks.table_id = tables[0];
    ks.field_bits = {40};
    ks.critical_field = 0;
    return ks.make_key({id});
  }

  TxnRequest make_request(std::mt19937_64& rng) override {
    bool rw = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.rw_ratio;
    TxnRequest req;
    if (rw) {
      u64 id = picker.pick_rw(rng);
      req.type = 1;  // UpdateOne
      req.ops = {{tables[0], key_of(id, 0), true, WriteIntent::Update}};
      u32 len = record_len;
      req.stage = [len](TxnContext& ctx) {
        for (auto& [k, e] : ctx.entries) {
          if (!e.is_write) continue;
          Bytes next = e.record;
          next.resize(len, 0);
          put_u64(next.data(), get_u64(next.data()) + 1);
          e.new_payload = std::move(next);
          e.staged = true;
        }
      };
    } else {
      u64 id = picker.pick(rng);
      req.type = 2;  // ReadOne
      req.read_only = true;
      req.ops = {{tables[0], key_of(id, 0), false, WriteIntent::Update}};
    }
    return req;
  }
};

struct SmallBankWorkload : Workload {
  KeyPicker picker;
  static constexpr u32 kRecordLen = 16;
  static constexpr i64 kInitialBalance = 1000;

  explicit SmallBankWorkload(const WorkloadSpec& s) : picker(s) { spec = s; }

  LotusKey key_of(u64 account, u16 table_idx) const override {
    TableKeySpec ks;
    ks.table_id = tables[table_idx];
    ks.field_bits = {2, 40};  // table tag, account id
    ks.critical_field = 1;
    return ks.make_key({table_idx, account});
  }

  u64 pick_other(std::mt19937_64& rng, u64 a) const {
    for (int i = 0; i < 16; i++) {
      u64 b = picker.pick_rw(rng);
      if (b != a) return b;
    }
    return (a + 1) % spec.scale;
  }

  TxnRequest make_request(std::mt19937_64& rng) override {
    double roll = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    TxnRequest req;
    u16 chk = tables[0], sav = tables[1];

    if (roll >= spec.rw_ratio) {  // Balance: read-only
      u64 a = picker.pick(rng);
      req.type = 10;
      req.read_only = true;
      req.ops = {{chk, key_of(a, 0), false, WriteIntent::Update},
                 {sav, key_of(a, 1), false, WriteIntent::Update}};
      return req;
    }

    i64 amount = 1 + static_cast<i64>(rng() % 100);
    u64 a = picker.pick_rw(rng);
    double sub = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (sub < 0.5) {
      // SendPayment: checking A -> checking B
      u64 b = pick_other(rng, a);
      LotusKey ka = key_of(a, 0), kb = key_of(b, 0);
      req.type = 11;
      req.ops = {{chk, ka, true, WriteIntent::Update}, {chk, kb, true, WriteIntent::Update}};
      req.stage = [chk, ka, kb, amount](TxnContext& ctx) {
        TxnEntry* ea = ctx.find(chk, ka);
        TxnEntry* eb = ctx.find(chk, kb);
        ea->new_payload = balance_payload(balance_of(ea->record) - amount, kRecordLen);
        eb->new_payload = balance_payload(balance_of(eb->record) + amount, kRecordLen);
        ea->staged = eb->staged = true;
      };
    } else if (sub < 0.75) {
      // TransactSavings: checking A -> savings A
      LotusKey kc = key_of(a, 0), ks = key_of(a, 1);
      req.type = 12;
      req.ops = {{chk, kc, true, WriteIntent::Update}, {sav, ks, true, WriteIntent::Update}};
      req.stage = [chk, sav, kc, ks, amount](TxnContext& ctx) {
        TxnEntry* ec = ctx.find(chk, kc);
        TxnEntry* es = ctx.find(sav, ks);
        ec->new_payload = balance_payload(balance_of(ec->record) - amount, kRecordLen);
        es->new_payload = balance_payload(balance_of(es->record) + amount, kRecordLen);
        ec->staged = es->staged = true;
      };
    } else {
      // Amalgamate: savings A + checking A -> checking B
      u64 b = pick_other(rng, a);
      LotusKey kc = key_of(a, 0), ks = key_of(a, 1), kb = key_of(b, 0);
      req.type = 13;
      req.ops = {{chk, kc, true, WriteIntent::Update},
                 {sav, ks, true, WriteIntent::Update},
                 {chk, kb, true, WriteIntent::Update}};
      req.stage = [chk, sav, kc, ks, kb](TxnContext& ctx) {
        TxnEntry* ec = ctx.find(chk, kc);
        TxnEntry* es = ctx.find(sav, ks);
        TxnEntry* eb = ctx.find(chk, kb);
        i64 moved = balance_of(ec->record) + balance_of(es->record);
        ec->new_payload = balance_payload(0, kRecordLen);
        es->new_payload = balance_payload(0, kRecordLen);
        eb->new_payload = balance_payload(balance_of(eb->record) + moved, kRecordLen);
        ec->staged = es->staged = eb->staged = true;
      };
    }
    return req;
  }
};

}  // namespace

std::unique_ptr<Workload> build_workload(Cluster& cluster, const WorkloadSpec& spec) {
  switch (spec.kind) {
    case WorkloadKind::Kvs: {
      auto wl = std::make_unique<KvsWorkload>(spec);
      TableSchema ts;
      ts.table_id = 0;
      ts.record_len = 40;
      ts.n_cells = cluster.config().cvt_cells;
      ts.capacity = spec.scale;
      wl->tables = {cluster.create_table(ts)};
      Bytes payload(40, 0);
      for (u64 id = 0; id < spec.scale; id++) {
        put_u64(payload.data(), 0);
        put_u64(payload.data() + 8, id);
        cluster.load_record(wl->tables[0], wl->key_of(id, 0), payload);
      }
      return wl;
    }
    case WorkloadKind::SmallBank: {
      auto wl = std::make_unique<SmallBankWorkload>(spec);
      for (u16 t = 0; t < 2; t++) {
        TableSchema ts;
        ts.table_id = t;
        ts.record_len = SmallBankWorkload::kRecordLen;
        ts.n_cells = cluster.config().cvt_cells;
        ts.capacity = spec.scale;
        wl->tables.push_back(cluster.create_table(ts));
      }
      Bytes payload = balance_payload(SmallBankWorkload::kInitialBalance,
                                      SmallBankWorkload::kRecordLen);
      for (u64 a = 0; a < spec.scale; a++) {
        cluster.load_record(wl->tables[0], wl->key_of(a, 0), payload);
        cluster.load_record(wl->tables[1], wl->key_of(a, 1), payload);
      }
      wl->initial_total =
          spec.scale * 2 * static_cast<u64>(SmallBankWorkload::kInitialBalance);
      return wl;
    }
  }
  throw std::logic_error("unknown workload");
}

}  // namespace lotus
