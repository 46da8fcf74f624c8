use proptest::prelude::*;
use teleop_core::protocol::{ErrorCode, InsertDirection, Mode, Role, WireMessage};

pub fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
    ]
}

pub fn vec3() -> impl Strategy<Value = [f64; 3]> {
    [finite(), finite(), finite()]
}

pub fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9_-]{1,16}",
        any::<String>().prop_filter("short", |s| s.len() < 200),
    ]
}

pub fn error_code() -> impl Strategy<Value = ErrorCode> {
    prop::sample::select(vec![
        ErrorCode::MalformedJson,
        ErrorCode::UnknownType,
        ErrorCode::MissingField,
        ErrorCode::InvalidField,
        ErrorCode::OversizeFrame,
        ErrorCode::NonFinite,
        ErrorCode::ProtocolViolation,
        ErrorCode::HandshakeTimeout,
        ErrorCode::Busy,
        ErrorCode::StaleValidation,
        ErrorCode::NotEngaged,
        ErrorCode::GatingViolation,
        ErrorCode::IkFailure,
        ErrorCode::Unreachable,
        ErrorCode::DepthLimit,
        ErrorCode::InvalidMode,
        ErrorCode::InvalidConfig,
        ErrorCode::CommandRejected,
        ErrorCode::DegenerateDirection,
    ])
}

pub fn message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (text(), prop::bool::ANY).prop_map(|(client_id, obs)| WireMessage::Hello {
            client_id,
            role: if obs { Role::Observer } else { Role::Operator },
        }),
        (text(), text()).prop_map(|(session_id, server_version)| WireMessage::HelloAck {
            session_id,
            server_version
        }),
        any::<u64>().prop_map(|t_client_ms| WireMessage::PinchStart { t_client_ms }),
        (any::<u64>(), any::<u64>(), finite(), finite(), finite()).prop_map(
            |(seq, t_client_ms, x_m, y_m, z_m)| WireMessage::WristSample {
                seq,
                t_client_ms,
                x_m,
                y_m,
                z_m
            }
        ),
        (any::<u64>(), any::<u64>()).prop_map(|(t_client_ms, last_seq)| WireMessage::PinchEnd {
            t_client_ms,
            last_seq
        }),
        (any::<u64>(), any::<u64>(), vec3(), vec3()).prop_map(
            |(move_id, n_samples, tip_start_mm, tip_end_mm)| WireMessage::MoveSummary {
                move_id,
                n_samples,
                tip_start_mm,
                tip_end_mm
            }
        ),
        (any::<u64>(), prop::bool::ANY)
            .prop_map(|(move_id, accepted)| WireMessage::Validate { move_id, accepted }),
        (
            any::<u64>(),
            prop::array::uniform7(finite()),
            vec3(),
            prop::sample::select(vec![Mode::FreeSpace, Mode::Approach, Mode::Inserted]),
            prop::option::of(text()),
        )
            .prop_map(|(tick, joints_rad, tip_mm, mode, engaged_client)| {
                WireMessage::StateBroadcast {
                    tick,
                    joints_rad,
                    tip_mm,
                    mode,
                    engaged_client,
                }
            }),
        (
            prop::option::of(finite()),
            prop::option::of(finite()),
            prop::option::of(finite())
        )
            .prop_map(|(scale, insert_increment_mm, insert_velocity_mm_s)| {
                WireMessage::ConfigSet {
                    scale,
                    insert_increment_mm,
                    insert_velocity_mm_s,
                }
            }),
        (vec3(), prop::option::of(vec3()))
            .prop_map(|(trocar_mm, axis)| WireMessage::Approach { trocar_mm, axis }),
        prop::bool::ANY.prop_map(|inward| WireMessage::Insert {
            direction: if inward {
                InsertDirection::In
            } else {
                InsertDirection::Out
            },
        }),
        Just(WireMessage::Retract {}),
        (error_code(), text()).prop_map(|(code, detail)| WireMessage::Error { code, detail }),
    ]
}
