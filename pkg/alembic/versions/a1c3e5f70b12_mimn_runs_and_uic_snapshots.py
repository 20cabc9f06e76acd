"""mimn_runs and uic_snapshots

Revision ID: a1c3e5f70b12
Revises:
Create Date: 2026-10-17 09:12:40.118305

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = 'a1c3e5f70b12'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    op.create_table(
        'mimn_runs',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('command', sa.String(length=32), nullable=False),
        sa.Column('status', sa.String(length=16), nullable=False),
        sa.Column('params', sa.JSON(), nullable=False),
        sa.Column('result', sa.JSON(), nullable=True),
        sa.Column('output_dir', sa.String(length=512), nullable=True),
        sa.Column('started_at', sa.DateTime(), nullable=False),
        sa.Column('finished_at', sa.DateTime(), nullable=True),
        sa.Column('error', sa.Text(), nullable=True),
        sa.PrimaryKeyConstraint('id', name=op.f('pk_mimn_runs')),
    )
    op.create_index('ix_mimn_runs_command_started', 'mimn_runs', ['command', 'started_at'], unique=False)

    op.create_table(
        'uic_snapshots',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('snapshot_id', sa.String(length=64), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=False),
        sa.Column('param_version', sa.Integer(), nullable=False),
        sa.Column('user_count', sa.Integer(), nullable=False),
        sa.Column('checksum', sa.String(length=32), nullable=False),
        sa.Column('path', sa.String(length=512), nullable=False),
        sa.Column('size_bytes', sa.Integer(), nullable=False),
        sa.PrimaryKeyConstraint('id', name=op.f('pk_uic_snapshots')),
    )
    op.create_index(op.f('ix_uic_snapshots_snapshot_id'), 'uic_snapshots', ['snapshot_id'], unique=True)
    op.create_index(op.f('ix_uic_snapshots_created_at'), 'uic_snapshots', ['created_at'], unique=False)


def downgrade() -> None:
    op.drop_index(op.f('ix_uic_snapshots_created_at'), table_name='uic_snapshots')
    op.drop_index(op.f('ix_uic_snapshots_snapshot_id'), table_name='uic_snapshots')
    op.drop_table('uic_snapshots')
    op.drop_index('ix_mimn_runs_command_started', table_name='mimn_runs')
    op.drop_table('mimn_runs')
