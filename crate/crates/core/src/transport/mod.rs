//! Framing and message exchange between learners and the controller.

mod codec;
mod messages;
mod session;

pub use codec::{
    Codec, DecodeError, Envelope, Kind, CRC_LEN, DEFAULT_MAX_PAYLOAD, HEADER_LEN, MAGIC, VERSION,
};
pub use messages::{decode_params, put_params, Message};
pub use session::{
    in_proc_pair, InProcSession, Metered, Session, StatsSnapshot, TcpSession, TransportStats,
};

use crate::error::Result;

/// Encode and send a typed message.
pub fn send_message(
    session: &mut impl Session,
    msg: &Message,
    round: u32,
    learner_index: u16,
) -> Result<()> {
    session.send(&msg.into_envelope(round, learner_index))
}

/// Receive and decode a typed message along with its envelope header.
pub fn recv_message(session: &mut impl Session) -> Result<(Envelope, Message)> {
    let env = session.recv()?;
    let msg = Message::from_envelope(&env)?;
    Ok((env, msg))
}
