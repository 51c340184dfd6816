//! Built-in experiments, addressable by name.

use crate::attacks::{EuiSource, JammerConfig, JammerKind};
use crate::ids::IdsConfig;
use crate::mac::{DevAddr, MicMode};
use crate::nodes::device::RxWindows;
use crate::nodes::gateway::CrcForwardPolicy;
use crate::nodes::server::RoutePolicy;
use crate::radio::{AirtimeModel, SpreadingFactor};
use crate::sim::scenario::{
    AckSpoofSpec, AttackerGatewaySpec, AttackerSpec, ChannelSpec, DeviceSpec, DisableMethod, DisableSpec, GatewaySpec,
    JammerSpec, LinkSpec, Scenario, ServerSpec, Sweep, SCHEMA,
};

pub const NAMES: [&str; 11] = [
    "baseline",
    "disconnect-impersonation",
    "disconnect-impersonation-v1_1",
    "jam-impersonation",
    "jam-impersonation-sticky-first",
    "jam-impersonation-most-frequent",
    "redundancy-defense",
    "authenticated-link-defense",
    "physical-protection-defense",
    "sf-sweep",
    "pull-flood-sweep",
];

pub const VICTIM: &str = "gw-1";
pub const ATTACKER_GW: &str = "attacker-gw";
pub const JAMMER: &str = "jammer-1";
pub const ATTACKER_ADDRESS: &str = "203.0.113.66:40666";

pub fn describe(name: &str) -> Option<&'static str> {
    Some(match name {
        "baseline" => "one device, one gateway, no attacker",
        "disconnect-impersonation" => "victim gateway unplugged, impostor withholds and replays an ACK (v1_0 MIC)",
        "disconnect-impersonation-v1_1" => "as disconnect-impersonation with the v1_1 MIC binding the acked counter",
        "jam-impersonation" => "wormhole jamming of the victim at SF10 with a 3x PULL flood, last_pull_wins",
        "jam-impersonation-sticky-first" => "jam-impersonation against a sticky_first route policy",
        "jam-impersonation-most-frequent" => "jam-impersonation against a most_frequent route policy",
        "redundancy-defense" => "disconnect-impersonation with a second legitimate gateway in range",
        "authenticated-link-defense" => "disconnect-impersonation against an authenticated, encrypted gateway link",
        "physical-protection-defense" => "disconnect-impersonation against a physically protected gateway",
        "sf-sweep" => "wormhole jamming of unconfirmed uplinks, 1000 frames per SF 7..12",
        "pull-flood-sweep" => "jam-impersonation over route policies x flood factors 1..4",
        _ => return None,
    })
}

fn sf(n: u8) -> SpreadingFactor {
    SpreadingFactor::new(n).expect("canned SF is valid")
}

fn dev_addr(n: u8) -> DevAddr {
    DevAddr([0x26, 0x01, 0x12, 0x33 + n])
}

fn device(n: u8, sf_: u8, interval_ms: u64) -> DeviceSpec {
    DeviceSpec {
        id: format!("dev-{n}"),
        dev_addr: dev_addr(n),
        key: format!("2b7e151628aed2a6abf7158809cf4f{:02x}", 0x30 + n),
        sf: sf(sf_),
        freq: 868.1,
        interval_ms,
        jitter_ms: 2000,
        phase_ms: None,
        confirmed: true,
        payload_len: 25,
        retransmit_limit: 3,
        backoff_ms: (1000, 3000),
        max_uplinks: None,
    }
}

fn gateway(n: u8) -> GatewaySpec {
    GatewaySpec {
        id: format!("gw-{n}"),
        eui: crate::codec::GatewayEui([0xb8, 0x27, 0xeb, 0xff, 0xfe, 0x61, 0xa0, n]),
        address: format!("198.51.100.{}:4000{n}", 10 * n),
        pull_interval_ms: 10_000,
        pull_jitter: false,
        crc_forward_policy: CrcForwardPolicy::ForwardWithStat,
        location: format!("site-{n}"),
        registered: true,
        physically_protected: false,
        link: LinkSpec::default(),
    }
}

fn attacker(victim: &str) -> AttackerSpec {
    AttackerSpec {
        gateway: AttackerGatewaySpec {
            id: ATTACKER_GW.into(),
            address: ATTACKER_ADDRESS.into(),
            link: LinkSpec {
                eavesdroppable: false,
                authenticated: false,
                latency_ms: 40,
            },
        },
        victim: victim.into(),
        eui_sources: vec![EuiSource::Sniff, EuiSource::Registry],
        sniff_at_ms: None,
        disable: None,
        impostor_at_ms: None,
        jammer: None,
        pull_flood_factor: 1.0,
        pull_jitter: false,
        ack_spoof: None,
    }
}

fn link(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

fn base(name: &str, horizon_ms: u64) -> Scenario {
    Scenario {
        schema: SCHEMA.into(),
        name: name.into(),
        description: describe(name).unwrap_or_default().into(),
        seed: 1,
        horizon_ms,
        mic_mode: MicMode::V1_0,
        route_policy: RoutePolicy::LastPullWins,
        airtime: AirtimeModel::default(),
        rx_windows: RxWindows::default(),
        channel: ChannelSpec::default(),
        server: ServerSpec::default(),
        devices: Vec::new(),
        gateways: Vec::new(),
        attacker: None,
        adjacency: Vec::new(),
        ids: IdsConfig::default(),
        registry_public: true,
        route_share_warmup_ms: 60_000,
        sweep: None,
    }
}

fn baseline() -> Scenario {
    let mut sc = base("baseline", 600_000);
    sc.devices.push(device(1, 7, 30_000));
    sc.gateways.push(gateway(1));
    sc.adjacency.push(link("dev-1", "gw-1"));
    sc
}

fn disconnect(name: &str, mic_mode: MicMode) -> Scenario {
    let mut sc = base(name, 900_000);
    sc.mic_mode = mic_mode;
    sc.devices.push(device(1, 7, 60_000));
    sc.gateways.push(gateway(1));
    let mut a = attacker(VICTIM);
    a.sniff_at_ms = Some(30_000);
    a.disable = Some(DisableSpec {
        method: DisableMethod::Disconnect,
        at_ms: 90_000,
    });
    a.impostor_at_ms = Some(120_000);
    a.ack_spoof = Some(AckSpoofSpec {
        targets: vec![dev_addr(1)],
    });
    sc.attacker = Some(a);
    sc.adjacency = vec![link("dev-1", "gw-1"), link("dev-1", ATTACKER_GW)];
    sc
}

fn jam(name: &str, policy: RoutePolicy) -> Scenario {
    let mut sc = base(name, 1_200_000);
    sc.route_policy = policy;
    sc.gateways.push(gateway(1));
    sc.adjacency.push(link(JAMMER, "gw-1"));
    for n in 1..=3u8 {
        let mut d = device(n, 10, 20_000);
        // Spread the three devices across the period so they rarely collide.
        d.phase_ms = Some((n as u64 - 1) * 20_000 / 3);
        sc.adjacency.push(link(&d.id, "gw-1"));
        sc.adjacency.push(link(&d.id, ATTACKER_GW));
        sc.devices.push(d);
    }
    let mut a = attacker(VICTIM);
    a.sniff_at_ms = Some(60_000);
    a.disable = Some(DisableSpec {
        method: DisableMethod::Jam,
        at_ms: 180_000,
    });
    a.impostor_at_ms = Some(180_000);
    a.pull_flood_factor = 3.0;
    a.jammer = Some(JammerSpec {
        config: JammerConfig::new(JAMMER, JammerKind::Wormhole, (1..=3).map(dev_addr)),
        active_from_ms: None,
        active_until_ms: None,
    });
    sc.attacker = Some(a);
    sc
}

fn redundancy() -> Scenario {
    let mut sc = disconnect("redundancy-defense", MicMode::V1_0);
    sc.gateways.push(gateway(2));
    sc.adjacency.push(link("dev-1", "gw-2"));
    sc
}

fn authenticated_link() -> Scenario {
    let mut sc = disconnect("authenticated-link-defense", MicMode::V1_0);
    sc.gateways[0].link = LinkSpec {
        eavesdroppable: false,
        authenticated: true,
        latency_ms: 20,
    };
    sc.server.require_authenticated_link = true;
    sc
}

fn physical_protection() -> Scenario {
    let mut sc = disconnect("physical-protection-defense", MicMode::V1_0);
    sc.gateways[0].physically_protected = true;
    sc
}

fn sf_sweep() -> Scenario {
    let mut sc = base("sf-sweep", 1);
    let mut d = device(1, 7, 3000);
    d.confirmed = false;
    d.jitter_ms = 500;
    sc.devices.push(d);
    sc.gateways.push(gateway(1));
    sc.adjacency = vec![link("dev-1", "gw-1"), link("dev-1", ATTACKER_GW), link(JAMMER, "gw-1")];
    let mut a = attacker(VICTIM);
    a.jammer = Some(JammerSpec {
        config: JammerConfig::new(JAMMER, JammerKind::Wormhole, [dev_addr(1)]),
        active_from_ms: Some(0),
        active_until_ms: None,
    });
    sc.attacker = Some(a);
    sc.sweep = Some(Sweep::Sf {
        sfs: (7..=12).collect(),
        frames: 1000,
    });
    sc
}

fn pull_flood_sweep() -> Scenario {
    let mut sc = jam("pull-flood-sweep", RoutePolicy::LastPullWins);
    sc.description = describe("pull-flood-sweep").unwrap_or_default().into();
    sc.sweep = Some(Sweep::PullFlood {
        policies: RoutePolicy::ALL.to_vec(),
        factors: vec![1.0, 2.0, 3.0, 4.0],
    });
    sc
}

/// Expands a canned name into its inline definition.
pub fn canned(name: &str) -> Option<Scenario> {
    Some(match name {
        "baseline" => baseline(),
        "disconnect-impersonation" => disconnect(name, MicMode::V1_0),
        "disconnect-impersonation-v1_1" => disconnect(name, MicMode::V1_1),
        "jam-impersonation" => jam(name, RoutePolicy::LastPullWins),
        "jam-impersonation-sticky-first" => jam(name, RoutePolicy::StickyFirst),
        "jam-impersonation-most-frequent" => jam(name, RoutePolicy::MostFrequent),
        "redundancy-defense" => redundancy(),
        "authenticated-link-defense" => authenticated_link(),
        "physical-protection-defense" => physical_protection(),
        "sf-sweep" => sf_sweep(),
        "pull-flood-sweep" => pull_flood_sweep(),
        _ => return None,
    })
}
